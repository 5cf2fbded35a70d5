/**
 * Figure renderer CLI.
 *
 * Usage: node dist/render.js --kind loads|prefs|pathways --in BUNDLE_DIR --out FILE.svg [--title TEXT]
 *
 * Reads the documented analytics CSV bundle, validates the manifest's
 * schema version and the sum-to-one invariants, and writes one SVG.
 * Exit codes: 0 drawn, 1 usage or I/O problem, 2 schema or invariant
 * rejection.
 */

import { writeFileSync } from "node:fs";

import { CsvError } from "./csv.js";
import { renderLoads, renderPathways, renderPrefs } from "./figures.js";
import {
  InvariantError,
  SchemaError,
  readLoads,
  readManifest,
  readPathways,
  readPrefs,
} from "./schema.js";

const KINDS = ["loads", "prefs", "pathways"] as const;
type Kind = (typeof KINDS)[number];

interface Args {
  kind: Kind;
  inDir: string;
  out: string;
  title: string;
}

function parseArgs(argv: string[]): Args {
  const values = new Map<string, string>();
  for (let i = 0; i < argv.length; i += 2) {
    const flag = argv[i];
    const value = argv[i + 1];
    if (!flag.startsWith("--") || value === undefined) {
      throw new Error(`bad argument pair near ${flag}`);
    }
    values.set(flag.slice(2), value);
  }
  const kind = values.get("kind");
  const inDir = values.get("in");
  const out = values.get("out");
  if (!kind || !inDir || !out) {
    throw new Error("required: --kind loads|prefs|pathways --in BUNDLE_DIR --out FILE.svg");
  }
  if (!KINDS.includes(kind as Kind)) {
    throw new Error(`unknown kind ${kind}; expected one of ${KINDS.join(", ")}`);
  }
  return { kind: kind as Kind, inDir, out, title: values.get("title") ?? defaultTitle(kind as Kind) };
}

function defaultTitle(kind: Kind): string {
  return {
    loads: "Expert load distribution per MoE layer",
    prefs: "Modality preferences per expert",
    pathways: "Top activated pathways (top 2 highlighted)",
  }[kind];
}

export function renderBundle(kind: Kind, inDir: string, title: string): string {
  readManifest(inDir);
  if (kind === "loads") {
    return renderLoads(readLoads(inDir), title);
  }
  if (kind === "prefs") {
    return renderPrefs(readPrefs(inDir), title);
  }
  return renderPathways(readPathways(inDir), title);
}

export function main(argv: string[]): number {
  let args: Args;
  try {
    args = parseArgs(argv);
  } catch (err) {
    console.error(`usage error: ${(err as Error).message}`);
    return 1;
  }
  try {
    const svg = renderBundle(args.kind, args.inDir, args.title);
    writeFileSync(args.out, svg);
    console.log(`wrote ${args.out}`);
    return 0;
  } catch (err) {
    if (err instanceof SchemaError || err instanceof InvariantError || err instanceof CsvError) {
      console.error(`refusing to render: ${(err as Error).message}`);
      return 2;
    }
    console.error(`error: ${(err as Error).message}`);
    return 1;
  }
}

if (process.argv[1] && process.argv[1].endsWith("render.js")) {
  process.exit(main(process.argv.slice(2)));
}

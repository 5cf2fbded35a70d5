/**
 * Typed views of the analytics bundle plus the validation the renderer
 * refuses to draw without: a matching schema version and sum-to-one
 * invariants on the load and preference tables. Validation here is
 * deliberately duplicated with the producer (defense in depth across the
 * language boundary).
 */

import { readFileSync } from "node:fs";
import { join } from "node:path";

import { asFloat, asInt, parseCsv } from "./csv.js";

export const SUPPORTED_SCHEMA_VERSION = 1;
export const SUM_TOLERANCE = 1e-9;

export class SchemaError extends Error {}
export class InvariantError extends Error {}

export interface LoadRow {
  layer: number;
  expert: number;
  fraction: number;
}

export interface PrefRow {
  layer: number;
  expert: number;
  modality: string;
  fraction: number;
}

export interface PathwayRow {
  rank: number;
  token: number;
  layer: number;
  expert: number;
  isTop2: boolean;
}

export interface Manifest {
  run_id: string;
  config_hash: string;
  schema_version: number;
}

export function readManifest(dir: string): Manifest {
  let raw: string;
  try {
    raw = readFileSync(join(dir, "manifest.json"), "utf-8");
  } catch (err) {
    throw new SchemaError(`cannot read manifest.json in ${dir}: ${err}`);
  }
  const manifest = JSON.parse(raw) as Manifest;
  if (manifest.schema_version !== SUPPORTED_SCHEMA_VERSION) {
    throw new SchemaError(
      `schema version ${manifest.schema_version} not supported ` +
        `(renderer supports ${SUPPORTED_SCHEMA_VERSION})`,
    );
  }
  return manifest;
}

export function readLoads(dir: string): LoadRow[] {
  const table = parseCsv(readFileSync(join(dir, "loads.csv"), "utf-8"), [
    "layer",
    "expert",
    "fraction",
  ]);
  const rows = table.rows.map((cells) => ({
    layer: asInt(cells[0], "layer"),
    expert: asInt(cells[1], "expert"),
    fraction: asFloat(cells[2], "fraction"),
  }));
  const perLayer = new Map<number, number>();
  for (const row of rows) {
    if (row.fraction < 0) {
      throw new InvariantError(`negative load fraction at layer ${row.layer}`);
    }
    perLayer.set(row.layer, (perLayer.get(row.layer) ?? 0) + row.fraction);
  }
  for (const [layer, total] of perLayer) {
    if (Math.abs(total - 1) > SUM_TOLERANCE) {
      throw new InvariantError(`layer ${layer} load fractions sum to ${total}, expected 1`);
    }
  }
  return rows;
}

export function readPrefs(dir: string): PrefRow[] {
  const table = parseCsv(readFileSync(join(dir, "prefs.csv"), "utf-8"), [
    "layer",
    "expert",
    "modality",
    "fraction",
  ]);
  const rows = table.rows.map((cells) => ({
    layer: asInt(cells[0], "layer"),
    expert: asInt(cells[1], "expert"),
    modality: cells[2],
    fraction: asFloat(cells[3], "fraction"),
  }));
  const perExpert = new Map<string, number>();
  for (const row of rows) {
    const key = `${row.layer}:${row.expert}`;
    perExpert.set(key, (perExpert.get(key) ?? 0) + row.fraction);
  }
  for (const [key, total] of perExpert) {
    if (Math.abs(total - 1) > SUM_TOLERANCE) {
      throw new InvariantError(`expert ${key} modality fractions sum to ${total}, expected 1`);
    }
  }
  return rows;
}

export function readPathways(dir: string): PathwayRow[] {
  const table = parseCsv(readFileSync(join(dir, "pathways.csv"), "utf-8"), [
    "rank",
    "token",
    "layer",
    "expert",
    "is_top2",
  ]);
  const rows = table.rows.map((cells) => ({
    rank: asInt(cells[0], "rank"),
    token: asInt(cells[1], "token"),
    layer: asInt(cells[2], "layer"),
    expert: asInt(cells[3], "expert"),
    isTop2: asInt(cells[4], "is_top2") !== 0,
  }));
  for (const row of rows) {
    if (row.isTop2 !== row.rank < 2) {
      throw new InvariantError(
        `pathway rank ${row.rank} has is_top2=${row.isTop2}; top-2 annotation must match rank`,
      );
    }
  }
  return rows;
}

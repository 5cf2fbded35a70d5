/**
 * The three figure kinds: stacked per-layer expert-load bars, per-expert
 * modality-preference bars, and layer-by-layer pathway lines with the
 * top-2 ranks highlighted in color and the rest gray.
 */

import type { LoadRow, PathwayRow, PrefRow } from "./schema.js";
import { EXPERT_COLORS, GRAY, MODALITY_COLORS, Svg } from "./svg.js";

const MARGIN = { top: 40, right: 30, bottom: 30, left: 70 };

function uniqueSorted(values: number[]): number[] {
  return [...new Set(values)].sort((a, b) => a - b);
}

export function renderLoads(rows: LoadRow[], title: string): string {
  const layers = uniqueSorted(rows.map((r) => r.layer));
  const experts = uniqueSorted(rows.map((r) => r.expert));
  const barHeight = 26;
  const gap = 12;
  const plotWidth = 420;
  const height = MARGIN.top + layers.length * (barHeight + gap) + MARGIN.bottom + 20;
  const svg = new Svg(MARGIN.left + plotWidth + MARGIN.right, height);
  svg.text(MARGIN.left, 22, title, 14);

  const byLayer = new Map<number, Map<number, number>>();
  for (const row of rows) {
    if (!byLayer.has(row.layer)) byLayer.set(row.layer, new Map());
    byLayer.get(row.layer)!.set(row.expert, row.fraction);
  }
  layers.forEach((layer, i) => {
    const y = MARGIN.top + i * (barHeight + gap);
    svg.text(MARGIN.left - 8, y + barHeight / 2 + 4, `layer ${layer}`, 11, "end");
    let x = MARGIN.left;
    for (const expert of experts) {
      const fraction = byLayer.get(layer)?.get(expert) ?? 0;
      const w = fraction * plotWidth;
      if (w > 0) {
        svg.rect(x, y, w, barHeight, EXPERT_COLORS[expert % EXPERT_COLORS.length], "#ffffff");
      }
      x += w;
    }
  });
  // legend
  let lx = MARGIN.left;
  const ly = height - 18;
  for (const expert of experts) {
    svg.rect(lx, ly - 9, 10, 10, EXPERT_COLORS[expert % EXPERT_COLORS.length]);
    svg.text(lx + 14, ly, `expert ${expert}`, 10);
    lx += 84;
  }
  return svg.render();
}

export function renderPrefs(rows: PrefRow[], title: string): string {
  const layers = uniqueSorted(rows.map((r) => r.layer));
  const experts = uniqueSorted(rows.map((r) => r.expert));
  const modalities = [...new Set(rows.map((r) => r.modality))].sort();
  const barHeight = 16;
  const group = experts.length * (barHeight + 4) + 18;
  const plotWidth = 380;
  const height = MARGIN.top + layers.length * group + MARGIN.bottom + 20;
  const svg = new Svg(MARGIN.left + plotWidth + MARGIN.right, height);
  svg.text(MARGIN.left, 22, title, 14);

  const lookup = new Map<string, number>();
  for (const row of rows) {
    lookup.set(`${row.layer}:${row.expert}:${row.modality}`, row.fraction);
  }
  layers.forEach((layer, li) => {
    const gy = MARGIN.top + li * group;
    svg.text(MARGIN.left - 8, gy + 10, `layer ${layer}`, 11, "end");
    experts.forEach((expert, ei) => {
      const y = gy + ei * (barHeight + 4);
      svg.text(MARGIN.left - 8, y + barHeight - 3, `e${expert}`, 9, "end", "#777777");
      let x = MARGIN.left;
      for (const modality of modalities) {
        const fraction = lookup.get(`${layer}:${expert}:${modality}`) ?? 0;
        const w = fraction * plotWidth;
        if (w > 0) {
          svg.rect(x, y, w, barHeight, MODALITY_COLORS[modality] ?? GRAY, "#ffffff");
        }
        x += w;
      }
    });
  });
  let lx = MARGIN.left;
  const ly = height - 18;
  for (const modality of modalities) {
    svg.rect(lx, ly - 9, 10, 10, MODALITY_COLORS[modality] ?? GRAY);
    svg.text(lx + 14, ly, modality, 10);
    lx += 76;
  }
  return svg.render();
}

export function renderPathways(rows: PathwayRow[], title: string): string {
  const layers = uniqueSorted(rows.map((r) => r.layer));
  const experts = uniqueSorted(rows.map((r) => r.expert));
  const maxExpert = Math.max(...experts, 1);
  const ranks = uniqueSorted(rows.map((r) => r.rank));
  const plotWidth = 440;
  const plotHeight = Math.max(180, (maxExpert + 1) * 40);
  const svg = new Svg(
    MARGIN.left + plotWidth + MARGIN.right,
    MARGIN.top + plotHeight + MARGIN.bottom,
  );
  svg.text(MARGIN.left, 22, title, 14);

  const xOf = (layerIndex: number) =>
    MARGIN.left + (layers.length === 1 ? plotWidth / 2 : (layerIndex * plotWidth) / (layers.length - 1));
  const yOf = (expert: number) =>
    MARGIN.top + plotHeight - (expert * plotHeight) / Math.max(maxExpert, 1);

  layers.forEach((layer, i) => {
    svg.line(xOf(i), MARGIN.top, xOf(i), MARGIN.top + plotHeight, "#eeeeee");
    svg.text(xOf(i), MARGIN.top + plotHeight + 16, `layer ${layer}`, 10, "middle");
  });
  for (const expert of experts) {
    svg.text(MARGIN.left - 8, yOf(expert) + 4, `expert ${expert}`, 10, "end");
  }

  const byRank = new Map<number, PathwayRow[]>();
  for (const row of rows) {
    if (!byRank.has(row.rank)) byRank.set(row.rank, []);
    byRank.get(row.rank)!.push(row);
  }
  // draw gray paths first, the highlighted top-2 on top
  for (const rank of [...ranks].reverse()) {
    const path = byRank
      .get(rank)!
      .sort((a, b) => a.layer - b.layer)
      .map((row): [number, number] => [
        xOf(layers.indexOf(row.layer)),
        yOf(row.expert) + (rank - ranks.length / 2) * 1.5,
      ]);
    const top2 = rank < 2;
    const color = top2 ? EXPERT_COLORS[rank] : GRAY;
    svg.polyline(path, color, top2 ? 2.5 : 1.2, top2 ? 1 : 0.7);
    for (const [x, y] of path) {
      svg.circle(x, y, top2 ? 3 : 1.8, color);
    }
  }
  return svg.render();
}

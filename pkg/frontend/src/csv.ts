/**
 * Strict reader for the analytics CSV schemas. Fields never contain
 * separators or quoting, so a plain split is exact; anything that does
 * not match the expected header or column count is an error.
 */

export class CsvError extends Error {}

export interface CsvTable {
  header: string[];
  rows: string[][];
}

export function parseCsv(text: string, expectedHeader: string[]): CsvTable {
  const lines = text.split("\n").filter((line) => line.length > 0);
  if (lines.length === 0) {
    throw new CsvError("empty CSV");
  }
  const header = lines[0].split(",");
  if (header.join(",") !== expectedHeader.join(",")) {
    throw new CsvError(
      `unexpected header [${header.join(", ")}], wanted [${expectedHeader.join(", ")}]`,
    );
  }
  const rows: string[][] = [];
  for (const line of lines.slice(1)) {
    const cells = line.split(",");
    if (cells.length !== header.length) {
      throw new CsvError(`row has ${cells.length} cells, header has ${header.length}: ${line}`);
    }
    rows.push(cells);
  }
  return { header, rows };
}

export function asInt(value: string, what: string): number {
  const n = Number(value);
  if (!Number.isInteger(n)) {
    throw new CsvError(`${what} is not an integer: ${value}`);
  }
  return n;
}

export function asFloat(value: string, what: string): number {
  const n = Number(value);
  if (!Number.isFinite(n)) {
    throw new CsvError(`${what} is not a finite number: ${value}`);
  }
  return n;
}

import { describe, expect, it } from "vitest";
import * as fs from "node:fs";
import * as path from "node:path";
import { fileURLToPath } from "node:url";
import { NamedTensor, readContainer, writeContainer } from "../src/ffmp.js";

const HERE = path.dirname(fileURLToPath(import.meta.url));
const GOLDEN = path.join(HERE, "..", "..", "tests", "golden", "sample.ffmp");

describe("ffmp container", () => {
  it("round-trips tensors byte-identically", () => {
    const tensors: NamedTensor[] = [
      { name: "a", dims: [2, 3], data: Float32Array.from([1, 2, 3, 4, 5, 6]) },
      { name: "长名字", dims: [1], data: Float32Array.from([0.5]) },
    ];
    const buf = writeContainer(tensors);
    const back = readContainer(buf);
    expect(back).toHaveLength(2);
    expect(back[0].dims).toEqual([2, 3]);
    expect(Array.from(back[0].data)).toEqual([1, 2, 3, 4, 5, 6]);
    expect(back[1].name).toBe("长名字");
    expect(writeContainer(back).equals(buf)).toBe(true);
  });

  it("writes the exact header layout", () => {
    const buf = writeContainer([]);
    expect(buf.subarray(0, 4).toString()).toBe("FFMP");
    expect(buf.readUInt32LE(4)).toBe(1);
    expect(buf.readUInt32LE(8)).toBe(0);
    expect(buf.length).toBe(12);
  });

  it("rejects bad magic and truncation", () => {
    expect(() => readContainer(Buffer.from("XXXX\0\0\0\0\0\0\0\0"))).toThrow(/magic/);
    const buf = writeContainer([{ name: "t", dims: [4], data: new Float32Array(4) }]);
    expect(() => readContainer(buf.subarray(0, buf.length - 3))).toThrow(/truncated/);
  });

  it("matches the golden container from the primary suite byte for byte", () => {
    // the same fixed tensors the primary test-suite generator used
    const shapes: [string, number[]][] = [["C1", [2, 8, 12]], ["C2", [3, 4, 6]], ["beta", [5]]];
    let k = 1.0;
    const tensors: NamedTensor[] = shapes.map(([name, dims]) => {
      const n = dims.reduce((a, b) => a * b, 1);
      const data = new Float32Array(n);
      for (let i = 0; i < n; i++) data[i] = Math.fround(i * 0.25 - k);
      k += 2.0;
      return { name, dims, data };
    });
    const golden = fs.readFileSync(GOLDEN);
    expect(writeContainer(tensors).equals(golden)).toBe(true);
  });
});

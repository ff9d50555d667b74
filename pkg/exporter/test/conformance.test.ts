import { describe, expect, it } from "vitest";
import { execFileSync } from "node:child_process";
import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";
import * as tf from "@tensorflow/tfjs";
import { PNG } from "pngjs";
import { exportPyramids } from "../src/cli.js";

function havePrimary(): boolean {
  try {
    execFileSync("python3", ["-c", "import fovsearch"], { stdio: "pipe" });
    return true;
  } catch {
    return false;
  }
}

function writeTestPng(file: string, h: number, w: number, seed: number) {
  const png = new PNG({ width: w, height: h });
  let state = seed + 1;
  for (let i = 0; i < w * h * 4; i++) {
    state = (state * 1103515245 + 12345) & 0x7fffffff;
    png.data[i] = i % 4 === 3 ? 255 : state % 256;
  }
  fs.writeFileSync(file, PNG.sync.write(png));
}

describe("exported pyramids conform to the primary FFMP contract", () => {
  it("exports with manifest and skips undecodable images", async () => {
    const dir = fs.mkdtempSync(path.join(os.tmpdir(), "exp-"));
    const imagesDir = path.join(dir, "images");
    fs.mkdirSync(imagesDir);
    writeTestPng(path.join(imagesDir, "good1.png"), 64, 96, 1);
    writeTestPng(path.join(imagesDir, "good2.png"), 320, 512, 2);
    fs.writeFileSync(path.join(imagesDir, "broken.png"), "not a png");

    const out = path.join(dir, "pyr");
    const args = new Map([
      ["images", imagesDir], ["out", out],
      ["width-mult", "0.0625"], ["seed", "0"],
    ]);
    const manifest = await exportPyramids(args);
    expect(manifest.images.map((i) => i.id)).toEqual(["good1", "good2"]);
    expect(manifest.errors.map((e) => e.id)).toEqual(["broken"]);
    expect(fs.existsSync(path.join(out, "good2.ffmp"))).toBe(true);
    expect(fs.existsSync(path.join(out, "manifest.json"))).toBe(true);

    if (!havePrimary()) {
      console.warn("primary package not importable; python read-back skipped");
      return;
    }
    const script = `
import sys
from fovsearch.core import load_pyramid
p = load_pyramid(sys.argv[1])
print(",".join(f"{l.shape[0]}x{l.shape[1]}x{l.shape[2]}" for l in p.levels))
`;
    const got = execFileSync(
      "python3", ["-c", script, path.join(out, "good2.ffmp")],
      { encoding: "utf-8" }).trim();
    expect(got).toBe("4x160x256,16x80x128,32x40x64,64x20x32,128x10x16");
  }, 120_000);
});

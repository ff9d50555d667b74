/**
 * Rasterizes COCO-style polygon annotations into 8-bit label maps:
 * 0 = background, k in 1..80 = the k-th "thing" category.  Overlapping
 * instances are drawn largest-first so smaller objects stay on top.
 */

import { PNG } from "pngjs";

export const THING_CLASSES = [
  "person", "bicycle", "car", "motorcycle", "airplane", "bus", "train",
  "truck", "boat", "traffic light", "fire hydrant", "stop sign",
  "parking meter", "bench", "bird", "cat", "dog", "horse", "sheep", "cow",
  "elephant", "bear", "zebra", "giraffe", "backpack", "umbrella", "handbag",
  "tie", "suitcase", "frisbee", "skis", "snowboard", "sports ball", "kite",
  "baseball bat", "baseball glove", "skateboard", "surfboard",
  "tennis racket", "bottle", "wine glass", "cup", "fork", "knife", "spoon",
  "bowl", "banana", "apple", "sandwich", "orange", "broccoli", "carrot",
  "hot dog", "pizza", "donut", "cake", "chair", "couch", "potted plant",
  "bed", "dining table", "toilet", "tv", "laptop", "mouse", "remote",
  "keyboard", "cell phone", "microwave", "oven", "toaster", "sink",
  "refrigerator", "book", "clock", "vase", "scissors", "teddy bear",
  "hair drier", "toothbrush",
];

export interface PolygonInstance {
  categoryIndex: number; // 1..80
  polygon: number[]; // flat [x0, y0, x1, y1, ...] in source coordinates
}

export function polygonArea(poly: number[]): number {
  let area = 0;
  const n = poly.length / 2;
  for (let i = 0; i < n; i++) {
    const j = (i + 1) % n;
    area += poly[2 * i] * poly[2 * j + 1] - poly[2 * j] * poly[2 * i + 1];
  }
  return Math.abs(area) / 2;
}

/** Even-odd scanline fill over pixel centers. */
export function fillPolygon(
  map: Uint8Array,
  width: number,
  height: number,
  poly: number[],
  value: number,
): void {
  const n = poly.length / 2;
  if (n < 3) return;
  const ys = poly.filter((_, i) => i % 2 === 1);
  const y0 = Math.max(0, Math.floor(Math.min(...ys)));
  const y1 = Math.min(height - 1, Math.ceil(Math.max(...ys)));
  for (let row = y0; row <= y1; row++) {
    const yc = row + 0.5;
    const xs: number[] = [];
    for (let i = 0; i < n; i++) {
      const j = (i + 1) % n;
      const ya = poly[2 * i + 1];
      const yb = poly[2 * j + 1];
      if (ya === yb) continue;
      if ((yc >= ya && yc < yb) || (yc >= yb && yc < ya)) {
        const t = (yc - ya) / (yb - ya);
        xs.push(poly[2 * i] + t * (poly[2 * j] - poly[2 * i]));
      }
    }
    xs.sort((a, b) => a - b);
    for (let k = 0; k + 1 < xs.length; k += 2) {
      const xStart = Math.max(0, Math.ceil(xs[k] - 0.5));
      const xEnd = Math.min(width - 1, Math.ceil(xs[k + 1] - 0.5) - 1);
      for (let x = xStart; x <= xEnd; x++) map[row * width + x] = value;
    }
  }
}

export function rasterizeInstances(
  instances: PolygonInstance[],
  width = 512,
  height = 320,
  sourceSize?: [number, number],
): Uint8Array {
  const map = new Uint8Array(width * height);
  let scaleX = 1;
  let scaleY = 1;
  if (sourceSize) {
    scaleX = width / sourceSize[0];
    scaleY = height / sourceSize[1];
  }
  const scaled = instances.map((inst) => {
    const poly = inst.polygon.map((v, i) => (i % 2 === 0 ? v * scaleX : v * scaleY));
    return { categoryIndex: inst.categoryIndex, poly, area: polygonArea(poly) };
  });
  // larger instances first so smaller ones end up on top
  scaled.sort((a, b) => b.area - a.area);
  for (const inst of scaled) {
    if (inst.categoryIndex < 1 || inst.categoryIndex > THING_CLASSES.length) {
      throw new Error(`category index ${inst.categoryIndex} outside [1, 80]`);
    }
    fillPolygon(map, width, height, inst.poly, inst.categoryIndex);
  }
  return map;
}

export function encodeGrayPng(map: Uint8Array, width: number, height: number): Buffer {
  const png = new PNG({ width, height, colorType: 0, inputColorType: 0, bitDepth: 8, inputHasAlpha: false });
  Buffer.from(map).copy(png.data);
  return PNG.sync.write(png, { colorType: 0, inputColorType: 0, bitDepth: 8, inputHasAlpha: false });
}

export function decodeGrayPng(buf: Buffer): { width: number; height: number; pixels: Uint8Array } {
  const png = PNG.sync.read(buf);
  // pngjs expands to RGBA; take the first channel
  const pixels = new Uint8Array(png.width * png.height);
  for (let i = 0; i < pixels.length; i++) pixels[i] = png.data[4 * i];
  return { width: png.width, height: png.height, pixels };
}

export function categoryTable(): Record<string, string> {
  const table: Record<string, string> = {};
  THING_CLASSES.forEach((name, i) => {
    table[String(i + 1)] = name;
  });
  return table;
}

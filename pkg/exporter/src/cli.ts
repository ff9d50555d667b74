/**
 * Exporter entry points.
 *
 *   tsx src/cli.ts export-pyramids --images DIR --out DIR
 *       [--width-mult 1.0] [--seed 0] [--weights FILE] [--image-size 320x512]
 *   tsx src/cli.ts export-label-maps --annotations FILE --out DIR
 *
 * export-pyramids writes one FFMP per decodable PNG (`C1..C5`, strides
 * 2/4/8/16/32) plus a manifest JSON; undecodable images are skipped and
 * listed in the manifest's error section.  export-label-maps rasterizes
 * COCO-style polygon annotations into 8-bit label-map PNGs at 320x512 with
 * the category table as a JSON sidecar.
 */

import * as fs from "node:fs";
import * as path from "node:path";
import * as tf from "@tensorflow/tfjs";
import { PNG } from "pngjs";
import { writeContainer } from "./ffmp.js";
import { WeightStore, channelCounts, extractPyramid, toNamedTensor } from "./resnet.js";
import { PolygonInstance, THING_CLASSES, categoryTable, encodeGrayPng, rasterizeInstances } from "./labelmap.js";

export interface ExportManifest {
  backbone: string;
  widthMult: number;
  seed: number;
  imageSize: [number, number]; // [height, width]
  channelCounts: number[];
  images: { id: string; ffmp: string }[];
  errors: { id: string; reason: string }[];
}

function parseArgs(argv: string[]): Map<string, string> {
  const map = new Map<string, string>();
  for (let i = 0; i < argv.length; i += 2) {
    if (!argv[i].startsWith("--")) throw new Error(`expected flag, got ${argv[i]}`);
    map.set(argv[i].slice(2), argv[i + 1]);
  }
  return map;
}

function loadImageTensor(file: string, height: number, width: number): tf.Tensor4D {
  const png = PNG.sync.read(fs.readFileSync(file));
  const src = tf.tensor3d(new Float32Array(png.data).map((v) => v / 255), [png.height, png.width, 4]);
  const rgb = src.slice([0, 0, 0], [png.height, png.width, 3]);
  const resized = tf.image.resizeBilinear(rgb as tf.Tensor3D, [height, width]);
  src.dispose();
  rgb.dispose();
  return resized.expandDims(0) as tf.Tensor4D;
}

export async function exportPyramids(args: Map<string, string>): Promise<ExportManifest> {
  const imagesDir = args.get("images");
  const outDir = args.get("out");
  if (!imagesDir || !outDir) throw new Error("need --images DIR and --out DIR");
  const widthMult = parseFloat(args.get("width-mult") ?? "1.0");
  const seed = parseInt(args.get("seed") ?? "0", 10);
  const sizeSpec = args.get("image-size") ?? "320x512";
  const [height, width] = sizeSpec.split("x").map((v) => parseInt(v, 10));
  fs.mkdirSync(outDir, { recursive: true });

  const store = new WeightStore(seed, args.get("weights"));
  const manifest: ExportManifest = {
    backbone: args.get("weights") ? `resnet50:${args.get("weights")}` : `resnet50:random(seed=${seed})`,
    widthMult,
    seed,
    imageSize: [height, width],
    channelCounts: channelCounts(widthMult),
    images: [],
    errors: [],
  };

  const files = fs.readdirSync(imagesDir).filter((f) => f.endsWith(".png")).sort();
  for (const file of files) {
    const id = path.basename(file, ".png");
    let image: tf.Tensor4D;
    try {
      image = loadImageTensor(path.join(imagesDir, file), height, width);
    } catch (err) {
      manifest.errors.push({ id, reason: String(err) });
      continue;
    }
    const pyr = extractPyramid(store, image, widthMult);
    const named = [
      await toNamedTensor("C1", pyr.c1),
      await toNamedTensor("C2", pyr.c2),
      await toNamedTensor("C3", pyr.c3),
      await toNamedTensor("C4", pyr.c4),
      await toNamedTensor("C5", pyr.c5),
    ];
    for (const t of Object.values(pyr)) t.dispose();
    image.dispose();
    const outPath = path.join(outDir, `${id}.ffmp`);
    fs.writeFileSync(outPath, writeContainer(named));
    manifest.images.push({ id, ffmp: outPath });
  }
  store.dispose();
  fs.writeFileSync(path.join(outDir, "manifest.json"), JSON.stringify(manifest, null, 1));
  return manifest;
}

interface CocoAnnotationFile {
  images: { id: number | string; file_name?: string; width?: number; height?: number }[];
  annotations: {
    image_id: number | string;
    category_id?: number;
    category_index?: number;
    segmentation: number[][];
  }[];
  categories?: { id: number; name: string }[];
}

export function exportLabelMaps(args: Map<string, string>): string[] {
  const annPath = args.get("annotations");
  const outDir = args.get("out");
  if (!annPath || !outDir) throw new Error("need --annotations FILE and --out DIR");
  const sizeSpec = args.get("image-size") ?? "320x512";
  const [height, width] = sizeSpec.split("x").map((v) => parseInt(v, 10));
  fs.mkdirSync(outDir, { recursive: true });

  const coco: CocoAnnotationFile = JSON.parse(fs.readFileSync(annPath, "utf-8"));
  const catIndex = new Map<number, number>();
  if (coco.categories) {
    for (const cat of coco.categories) {
      const idx = THING_CLASSES.indexOf(cat.name);
      if (idx >= 0) catIndex.set(cat.id, idx + 1);
    }
  }

  const written: string[] = [];
  for (const img of coco.images) {
    const anns = coco.annotations.filter((a) => a.image_id === img.id);
    const instances: PolygonInstance[] = [];
    for (const ann of anns) {
      const index = ann.category_index ?? catIndex.get(ann.category_id ?? -1);
      if (index === undefined) {
        throw new Error(`annotation for image ${img.id}: unresolvable category`);
      }
      for (const poly of ann.segmentation) instances.push({ categoryIndex: index, polygon: poly });
    }
    const source = img.width && img.height ? ([img.width, img.height] as [number, number]) : undefined;
    const map = rasterizeInstances(instances, width, height, source);
    const name = (img.file_name ?? String(img.id)).replace(/\.(png|jpg|jpeg)$/i, "");
    const outPath = path.join(outDir, `${name}.png`);
    fs.writeFileSync(outPath, encodeGrayPng(map, width, height));
    written.push(outPath);
  }
  fs.writeFileSync(path.join(outDir, "categories.json"), JSON.stringify(categoryTable(), null, 1));
  return written;
}

async function main() {
  const [cmd, ...rest] = process.argv.slice(2);
  const args = parseArgs(rest);
  if (cmd === "export-pyramids") {
    const manifest = await exportPyramids(args);
    console.log(`exported ${manifest.images.length} pyramids (${manifest.errors.length} errors)`);
  } else if (cmd === "export-label-maps") {
    const written = exportLabelMaps(args);
    console.log(`wrote ${written.length} label maps`);
  } else {
    console.error("usage: cli.ts export-pyramids|export-label-maps --flags ...");
    process.exit(2);
  }
}

const isMain = process.argv[1] && import.meta.url.endsWith(path.basename(process.argv[1]));
if (isMain) {
  main().catch((err) => {
    console.error(err);
    process.exit(1);
  });
}

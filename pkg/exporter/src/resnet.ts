/**
 * ResNet-50 feature pyramid: stage activations C1..C5 at strides
 * 2/4/8/16/32 relative to the input image.
 *
 * Weights come either from a local weight container (FFMP layout, one
 * tensor per parameter) or from a seeded random initialization; either way
 * the graph is the standard conv1 / layer1..layer4 bottleneck stack.  A
 * width multiplier shrinks every channel count for cheap smoke exports.
 */

import * as tf from "@tensorflow/tfjs";
import { NamedTensor, readContainer } from "./ffmp.js";
import * as fs from "node:fs";

export interface PyramidTensors {
  c1: tf.Tensor4D;
  c2: tf.Tensor4D;
  c3: tf.Tensor4D;
  c4: tf.Tensor4D;
  c5: tf.Tensor4D;
}

export interface ResNetConfig {
  widthMult: number;
  seed: number;
}

const BLOCKS = [3, 4, 6, 3];

function ch(base: number, mult: number): number {
  return Math.max(1, Math.round(base * mult));
}

export class WeightStore {
  private store = new Map<string, tf.Tensor>();
  private rng: number;

  constructor(private seed: number, weightFile?: string) {
    this.rng = seed;
    if (weightFile) {
      const tensors = readContainer(fs.readFileSync(weightFile));
      for (const t of tensors) {
        this.store.set(t.name, tf.keep(tf.tensor(Array.from(t.data), t.dims)));
      }
    }
  }

  conv(name: string, kh: number, kw: number, cin: number, cout: number): tf.Tensor4D {
    const key = `${name}_w`;
    if (!this.store.has(key)) {
      const fanIn = kh * kw * cin;
      this.store.set(
        key,
        tf.keep(tf.randomNormal([kh, kw, cin, cout], 0, Math.sqrt(2 / fanIn), "float32", this.seed + this.store.size)),
      );
    }
    return this.store.get(key) as tf.Tensor4D;
  }

  bn(name: string, c: number): { scale: tf.Tensor1D; offset: tf.Tensor1D } {
    const sk = `${name}_scale`;
    const ok = `${name}_offset`;
    if (!this.store.has(sk)) {
      this.store.set(sk, tf.keep(tf.ones([c])));
      this.store.set(ok, tf.keep(tf.zeros([c])));
    }
    return {
      scale: this.store.get(sk) as tf.Tensor1D,
      offset: this.store.get(ok) as tf.Tensor1D,
    };
  }

  dispose() {
    for (const t of this.store.values()) t.dispose();
    this.store.clear();
  }
}

function convBn(
  store: WeightStore,
  name: string,
  x: tf.Tensor4D,
  k: number,
  cout: number,
  stride: number,
  relu: boolean,
): tf.Tensor4D {
  const cin = x.shape[3];
  const w = store.conv(name, k, k, cin, cout);
  let y = tf.conv2d(x, w, stride, "same");
  const { scale, offset } = store.bn(name, cout);
  y = tf.mul(y, scale.reshape([1, 1, 1, cout])) as tf.Tensor4D;
  y = tf.add(y, offset.reshape([1, 1, 1, cout])) as tf.Tensor4D;
  return (relu ? tf.relu(y) : y) as tf.Tensor4D;
}

function bottleneck(
  store: WeightStore,
  name: string,
  x: tf.Tensor4D,
  mid: number,
  cout: number,
  stride: number,
): tf.Tensor4D {
  let shortcut = x;
  if (stride !== 1 || x.shape[3] !== cout) {
    shortcut = convBn(store, `${name}_down`, x, 1, cout, stride, false);
  }
  let y = convBn(store, `${name}_a`, x, 1, mid, 1, true);
  y = convBn(store, `${name}_b`, y, 3, mid, stride, true);
  y = convBn(store, `${name}_c`, y, 1, cout, 1, false);
  return tf.relu(tf.add(y, shortcut)) as tf.Tensor4D;
}

export function channelCounts(widthMult: number): number[] {
  return [ch(64, widthMult), ch(256, widthMult), ch(512, widthMult), ch(1024, widthMult), ch(2048, widthMult)];
}

/** Run the backbone on an NHWC float image batch; returns the five stages. */
export function extractPyramid(store: WeightStore, image: tf.Tensor4D, widthMult: number): PyramidTensors {
  const [c1n, c2n, c3n, c4n, c5n] = channelCounts(widthMult);
  return tf.tidy(() => {
    const c1 = convBn(store, "conv1", image, 7, c1n, 2, true);
    let x = tf.maxPool(c1, 3, 2, "same");
    const stages: tf.Tensor4D[] = [];
    const widths = [c2n, c3n, c4n, c5n];
    for (let s = 0; s < 4; s++) {
      const cout = widths[s];
      const mid = Math.max(1, Math.round(cout / 4));
      for (let b = 0; b < BLOCKS[s]; b++) {
        const stride = s > 0 && b === 0 ? 2 : 1;
        x = bottleneck(store, `layer${s + 1}_${b}`, x, mid, cout, stride);
      }
      stages.push(x);
    }
    const [c2, c3, c4, c5] = stages;
    return { c1: tf.keep(c1), c2: tf.keep(c2), c3: tf.keep(c3), c4: tf.keep(c4), c5: tf.keep(c5) };
  });
}

/** NHWC tensor -> CHW NamedTensor for the FFMP container. */
export async function toNamedTensor(name: string, t: tf.Tensor4D): Promise<NamedTensor> {
  const [, h, w, c] = t.shape;
  const chw = tf.transpose(t.squeeze([0]), [2, 0, 1]);
  const data = (await chw.data()) as Float32Array;
  chw.dispose();
  return { name, dims: [c, h, w], data: Float32Array.from(data) };
}

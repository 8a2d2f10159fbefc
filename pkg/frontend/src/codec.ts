/**
 * Array packing used on the wire: numeric buffers travel as base64 of
 * their little-endian bytes plus an explicit shape tuple.
 */

export interface PackedArray {
  b64: string;
  shape: number[];
  dtype: "f32" | "i32";
}

/** A decoded float32 buffer with its shape. */
export interface F32Array {
  data: Float32Array;
  shape: number[];
}

/** A decoded int32 buffer with its shape. */
export interface I32Array {
  data: Int32Array;
  shape: number[];
}

function bytesOf(packed: PackedArray): ArrayBuffer {
  const buf = Buffer.from(packed.b64, "base64");
  // Slice to the exact region: Buffer may sit inside a shared pool.
  return buf.buffer.slice(buf.byteOffset, buf.byteOffset + buf.byteLength);
}

function elementCount(shape: number[]): number {
  return shape.reduce((a, b) => a * b, 1);
}

export function decodeF32(packed: PackedArray): F32Array {
  if (packed.dtype !== "f32") {
    throw new Error(`expected f32 buffer, got ${packed.dtype}`);
  }
  const data = new Float32Array(bytesOf(packed));
  if (data.length !== elementCount(packed.shape)) {
    throw new Error(
      `f32 buffer holds ${data.length} values, shape [${packed.shape}] ` +
      `needs ${elementCount(packed.shape)}`,
    );
  }
  return { data, shape: packed.shape };
}

export function decodeI32(packed: PackedArray): I32Array {
  if (packed.dtype !== "i32") {
    throw new Error(`expected i32 buffer, got ${packed.dtype}`);
  }
  const data = new Int32Array(bytesOf(packed));
  if (data.length !== elementCount(packed.shape)) {
    throw new Error(
      `i32 buffer holds ${data.length} values, shape [${packed.shape}] ` +
      `needs ${elementCount(packed.shape)}`,
    );
  }
  return { data, shape: packed.shape };
}

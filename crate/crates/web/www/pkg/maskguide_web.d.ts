/* tslint:disable */
/* eslint-disable */

/**
 * Spatial attention of a single head applied directly to the leaf's RGB
 * planes: 1×1 conv over (channel max, channel mean), softmax over pixels.
 */
export function attention(seed: bigint, classes: number, class_id: number, epsilon: number, size: number, w_max: number, w_mean: number, bias: number): Uint8Array;

/**
 * Per-class AP and mAP for detection and ground-truth text in the
 * `image_id class x y w h [confidence]` line format.
 */
export function detect_eval(detections: string, ground_truth: string, iou: number): string;

/**
 * Ground-truth attention map of one mask (`"vein"` or `"contour"`) pooled
 * by `pool`, drawn back at full size.
 */
export function ground_truth(seed: bigint, classes: number, class_id: number, epsilon: number, size: number, region: string, pool: number): Uint8Array;

/**
 * Rendered leaf image, `size × size` RGBA.
 */
export function leaf_image(seed: bigint, classes: number, class_id: number, epsilon: number, size: number): Uint8Array;

/**
 * Vein mask in red, contour band in blue.
 */
export function leaf_masks(seed: bigint, classes: number, class_id: number, epsilon: number, size: number): Uint8Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly attention: (a: bigint, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number, number];
    readonly detect_eval: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly ground_truth: (a: bigint, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number, number];
    readonly leaf_image: (a: bigint, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly leaf_masks: (a: bigint, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;

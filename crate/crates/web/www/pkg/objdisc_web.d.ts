/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Global saliency rescaled to `[0, 1]`, row-major.
     */
    global_saliency(): Float32Array;
    grid(): number;
    image_size(): number;
    /**
     * Cosine similarity to the cell at `(row, col)`, clamped to `[0, 1]`.
     * Empty when the cell has no activation.
     */
    local_saliency(row: number, col: number): Float32Array;
    /**
     * Up to `count` maxima above `alpha * max`, as `[row, col, persistence, ...]`.
     */
    maxima(alpha: number, count: number): Float32Array;
    /**
     * A fresh image; `noise` is the background strength.
     */
    constructor(seed: number, noise: number, speckle: number);
    /**
     * Proposals from every layer as JSON: `{"proposals": [{box, group,
     * layer}], "objects": [box], "error": null}`.
     */
    proposals(alpha: number, beta: number, max_maxima: number): string;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_global_saliency: (a: number) => [number, number];
    readonly demo_grid: (a: number) => number;
    readonly demo_image_size: (a: number) => number;
    readonly demo_local_saliency: (a: number, b: number, c: number) => [number, number];
    readonly demo_maxima: (a: number, b: number, c: number) => [number, number];
    readonly demo_new: (a: number, b: number, c: number) => number;
    readonly demo_proposals: (a: number, b: number, c: number, d: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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

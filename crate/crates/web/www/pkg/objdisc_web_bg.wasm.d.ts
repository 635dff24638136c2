/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const demo_global_saliency: (a: number) => [number, number];
export const demo_grid: (a: number) => number;
export const demo_image_size: (a: number) => number;
export const demo_local_saliency: (a: number, b: number, c: number) => [number, number];
export const demo_maxima: (a: number, b: number, c: number) => [number, number];
export const demo_new: (a: number, b: number, c: number) => number;
export const demo_proposals: (a: number, b: number, c: number, d: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;

/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const attention_kinds: () => [number, number];
export const caption_overlap: (a: number, b: number, c: number, d: number) => [number, number, number];
export const cross_block_connectivity: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const lr_curve: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
export const recall_table: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_drop_slice: (a: number, b: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_alloc: () => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;

/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const demo_attention: (a: number, b: number, c: number) => [number, number, number, number];
export const demo_attentionHeight: (a: number) => number;
export const demo_attentionWidth: (a: number) => number;
export const demo_height: (a: number) => number;
export const demo_new: (a: number) => [number, number, number];
export const demo_orbitRender: (a: number, b: number, c: number) => [number, number, number, number];
export const demo_packetMosaic: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const demo_viewCount: (a: number) => number;
export const demo_width: (a: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;

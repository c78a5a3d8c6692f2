/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    attentionHeight(): number;
    /**
     * Attention maps are at feature-map resolution.
     */
    attentionWidth(): number;
    attention(azimuth: number, elevation: number): Uint8Array;
    height(): number;
    constructor(seed: number);
    orbitRender(azimuth: number, elevation: number): Uint8Array;
    packetMosaic(view: number, level: number, db2: boolean): Uint8Array;
    viewCount(): number;
    width(): number;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_attention: (a: number, b: number, c: number) => [number, number, number, number];
    readonly demo_attentionHeight: (a: number) => number;
    readonly demo_attentionWidth: (a: number) => number;
    readonly demo_height: (a: number) => number;
    readonly demo_new: (a: number) => [number, number, number];
    readonly demo_orbitRender: (a: number, b: number, c: number) => [number, number, number, number];
    readonly demo_packetMosaic: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly demo_viewCount: (a: number) => number;
    readonly demo_width: (a: number) => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
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

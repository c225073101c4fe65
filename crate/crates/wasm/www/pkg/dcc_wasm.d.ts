/* tslint:disable */
/* eslint-disable */

/**
 * Slow-timescale iterations on small sampled devices, each agent solved
 * exactly.
 */
export function coordinate(n_agents: number, iterations: number, alpha: number, seed: bigint): string;

/**
 * Error allowance of the decomposed reward for per-step offload
 * probabilities given as a comma-separated list.
 */
export function decomposition_bound(freqs: string, alpha: number): number;

/**
 * Solves one device's constrained problem exactly.
 */
export function solve_device(aoi_cap: number, battery_cap: number, max_harvest: number, max_cost: number, alpha: number, theta_i: number, theta_minus_i: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly coordinate: (a: number, b: number, c: number, d: bigint) => [number, number, number, number];
    readonly decomposition_bound: (a: number, b: number, c: number) => [number, number, number];
    readonly solve_device: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
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

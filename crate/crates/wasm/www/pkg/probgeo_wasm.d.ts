/* tslint:disable */
/* eslint-disable */

/**
 * The benchmark data set as `[[x, y], ...]`.
 */
export function benchmark_points(): string;

/**
 * Length estimate and its spread as the number of solver evaluations grows.
 * `midpoint_gap` is the distance between the posterior mean and the shooting
 * reference at `t = 0.5`.
 */
export function convergence(metric_json: string, points_json: string, a: Float64Array, b: Float64Array, n_values: Uint32Array): string;

/**
 * Fits the local-metric field to `points_json` and returns the metric
 * document plus a log-determinant map for shading.
 */
export function fit_metric(points_json: string, components: number, seed: bigint): string;

/**
 * Boundary value problem from `a` to `b` on the fitted field: posterior mean,
 * marginal spread, `n_samples` joint sample paths and the shooting reference.
 */
export function solve_geodesic(metric_json: string, points_json: string, a: Float64Array, b: Float64Array, n_points: number, n_samples: number, seed: bigint): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly benchmark_points: () => [number, number, number, number];
    readonly convergence: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number, j: number) => [number, number, number, number];
    readonly fit_metric: (a: number, b: number, c: number, d: bigint) => [number, number, number, number];
    readonly solve_geodesic: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number, j: number, k: bigint) => [number, number, number, number];
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

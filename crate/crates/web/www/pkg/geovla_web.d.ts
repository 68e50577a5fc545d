/* tslint:disable */
/* eslint-disable */

export class FlowDemo {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    losses(): Float64Array;
    /**
     * Positions of one particle across the Euler steps.
     */
    path(i: number): Float64Array;
    paths(): number;
    samples(): Float64Array;
}

export class Snapshot {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    depth(view: number): Uint8Array;
    instruction(): string;
    rgb(view: number): Uint8Array;
    score(): number;
    size(): number;
    step(): number;
    total_steps(): number;
    views(): number;
}

/**
 * Trains the two-point flow toy, then integrates with `euler_steps` steps.
 */
export function flow_demo(train_steps: number, euler_steps: number, particles: number, seed: number): FlowDemo;

/**
 * Scripted rollout of `task` (1-5) paused after `step` actions.
 */
export function snapshot(task: number, seed: number, step: number, size: number): Snapshot;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_flowdemo_free: (a: number, b: number) => void;
    readonly __wbg_snapshot_free: (a: number, b: number) => void;
    readonly flow_demo: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly flowdemo_losses: (a: number) => [number, number];
    readonly flowdemo_path: (a: number, b: number) => [number, number];
    readonly flowdemo_paths: (a: number) => number;
    readonly flowdemo_samples: (a: number) => [number, number];
    readonly snapshot: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly snapshot_depth: (a: number, b: number) => [number, number];
    readonly snapshot_instruction: (a: number) => [number, number];
    readonly snapshot_rgb: (a: number, b: number) => [number, number];
    readonly snapshot_score: (a: number) => number;
    readonly snapshot_size: (a: number) => number;
    readonly snapshot_step: (a: number) => number;
    readonly snapshot_total_steps: (a: number) => number;
    readonly snapshot_views: (a: number) => number;
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

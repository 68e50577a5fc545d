/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_flowdemo_free: (a: number, b: number) => void;
export const __wbg_snapshot_free: (a: number, b: number) => void;
export const flow_demo: (a: number, b: number, c: number, d: number) => [number, number, number];
export const flowdemo_losses: (a: number) => [number, number];
export const flowdemo_path: (a: number, b: number) => [number, number];
export const flowdemo_paths: (a: number) => number;
export const flowdemo_samples: (a: number) => [number, number];
export const snapshot: (a: number, b: number, c: number, d: number) => [number, number, number];
export const snapshot_depth: (a: number, b: number) => [number, number];
export const snapshot_instruction: (a: number) => [number, number];
export const snapshot_rgb: (a: number, b: number) => [number, number];
export const snapshot_score: (a: number) => number;
export const snapshot_size: (a: number) => number;
export const snapshot_step: (a: number) => number;
export const snapshot_total_steps: (a: number) => number;
export const snapshot_views: (a: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;

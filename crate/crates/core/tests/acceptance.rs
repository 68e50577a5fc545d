//! One line per acceptance criterion. Run with
//! `cargo test --release -p geovla --test acceptance`.
//!
//! Plain `main` rather than the libtest harness, so the lines are printed
//! even when everything passes.
//!
//! The end-to-end comparison (criterion 7) trains two full policies and
//! takes roughly half an hour on one core; it reports SOFT-FAIL instead of
//! failing the run when the margin falls short.

mod common;

use std::path::PathBuf;

use common::Check;

fn line(id: usize, name: &str, c: &Check) {
    println!("[{}] {id}. {name}: {}", if c.pass { "PASS" } else { "FAIL" }, c.detail);
}

fn end_to_end() -> (bool, String) {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-e2e");
    let _ = std::fs::remove_dir_all(&root);
    let config = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/desk.conf");
    match common::end_to_end(&root, "11", &config) {
        Ok(r) => {
            let margin = r.fused_pooled - r.baseline_pooled;
            let avg: Vec<String> = r.table.rows.iter().map(|row| format!("{} {:.2}", row.policy, row.average())).collect();
            (
                margin >= 5.0,
                format!(
                    "pooled tasks 1-2 success baseline {:.2}% fused {:.2}% margin {margin:+.2} pts (need >= +5), averages {avg:?}, artifacts in {}",
                    r.baseline_pooled,
                    r.fused_pooled,
                    r.artifacts.display()
                ),
            )
        }
        Err(e) => (false, format!("errored: {e}")),
    }
}

fn main() {
    let hard: [(usize, &str, fn() -> Check); 6] = [
        (1, "gradients", common::criterion_gradients),
        (2, "fuser oracle", common::criterion_fuser_oracle),
        (3, "no-op chain", common::criterion_noop_chain),
        (4, "flow matching", common::criterion_flow),
        (5, "geometry pretraining", common::criterion_geometry),
        (6, "simulator protocol", common::criterion_sim_protocol),
    ];
    let mut failed = Vec::new();
    for (i, name, f) in hard {
        let c = f();
        line(i, name, &c);
        if !c.pass {
            failed.push(i);
        }
    }
    // a panic inside the long run must not turn the soft criterion hard
    let (e2e_pass, e2e_detail) =
        std::panic::catch_unwind(end_to_end).unwrap_or_else(|_| (false, "panicked, see output above".into()));
    println!("[{}] 7. end-to-end comparison: {e2e_detail}", if e2e_pass { "PASS" } else { "SOFT-FAIL" });
    let repro = common::criterion_reproducibility();
    line(8, "reproducibility", &repro);
    if !repro.pass {
        failed.push(8);
    }
    if !failed.is_empty() {
        eprintln!("criteria failed: {failed:?}");
        std::process::exit(1);
    }
    println!("acceptance: all hard criteria passed");
}

//! Oracle run behind the end-to-end thresholds in the acceptance suite.
//! Prints teacher accuracy, per-seed val agreement for fixed_teacher and
//! function_matching, and function_matching test accuracy at the short and
//! long budgets.
//!
//! Usage: cargo run --release --example trend_oracle [out-dir]
#[path = "../tests/common/trend.rs"]
mod trend;

use std::path::PathBuf;
use std::time::Instant;

use funmatch::augment::ConsistencyMode;
use funmatch::harness::{distill, train_teacher, SplitTag};

fn main() -> funmatch::Result<()> {
    let out = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "trend-oracle".into()),
    );
    let t0 = Instant::now();
    let teacher = train_teacher(&trend::teacher_config(), &out)?;
    println!(
        "teacher test top1 {:.4} ({:.1}s)",
        teacher.final_row(SplitTag::Test).unwrap().top1,
        t0.elapsed().as_secs_f64()
    );
    let mut agree = [Vec::new(), Vec::new()];
    for seed in trend::SEEDS {
        for (i, mode) in [
            ConsistencyMode::FixedTeacher,
            ConsistencyMode::FunctionMatching,
        ]
        .into_iter()
        .enumerate()
        {
            let t0 = Instant::now();
            let o = distill(
                &trend::distill_config(&teacher.checkpoint_path, mode, seed, trend::LONG_EPOCHS),
                &out,
            )?;
            let v = o.final_row(SplitTag::Val).unwrap().agreement.unwrap();
            let t = o.final_row(SplitTag::Test).unwrap().top1;
            println!(
                "{:18} seed {seed}: val agreement {v:.4}, test top1 {t:.4} ({:.1}s)",
                mode.as_str(),
                t0.elapsed().as_secs_f64()
            );
            agree[i].push(v);
        }
    }
    let (fixed, fm) = (
        trend::median(agree[0].clone()),
        trend::median(agree[1].clone()),
    );
    println!("median val agreement: fixed_teacher {fixed:.4}, function_matching {fm:.4}, gap {:.2} points", 100.0 * (fm - fixed));
    let short = distill(
        &trend::distill_config(
            &teacher.checkpoint_path,
            ConsistencyMode::FunctionMatching,
            0,
            trend::SHORT_EPOCHS,
        ),
        &out,
    )?;
    println!(
        "function_matching test top1 at {} epochs: {:.4}",
        trend::SHORT_EPOCHS,
        short.final_row(SplitTag::Test).unwrap().top1
    );
    Ok(())
}

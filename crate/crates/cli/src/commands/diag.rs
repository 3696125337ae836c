use std::fmt::Write as _;
use std::path::Path;

use depthgrow_core::gradcheck::{gradcheck as run_gradcheck, GradcheckConfig};
use depthgrow_core::training::{evaluate, train_stage1, train_stage2};
use depthgrow_core::{DepthGrowModel, Float, Pair, View};

use super::data::resolve_vocab;
use super::{
    at_precision, corpus_dir, guard, load_train_valid, prepare, sibling, write_file, CONFIG_ECHO,
};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::Common;

pub const SWEEP_HEADER: &str =
    "method,depth,bottom_blocks,top_blocks,trainable_params,steps,valid_loss,valid_acc";

/// Runs the finite-difference check; a failure maps to the numeric exit status.
///
/// The tiny default model is used unless `--config` supplies a `[model]` table.
pub fn gradcheck(common: &Common, n_params: Option<usize>, tolerance: Option<f64>) -> Result<()> {
    let cfg = prepare(common)?;
    let mut g = GradcheckConfig::default();
    if common.config.is_some() {
        g.model = cfg.model.clone();
    }
    g.seed = cfg.seed();
    g.n_params = n_params.unwrap_or(g.n_params);
    g.tolerance = tolerance.unwrap_or(g.tolerance);
    let report = run_gradcheck(&g)?;
    println!(
        "checked {} coordinates over {}",
        report.samples.len(),
        report.families().join(", ")
    );
    if let Some(w) = report.worst() {
        println!(
            "worst: {}[{}] ({}) analytic {:.6e} numeric {:.6e} rel {:.3e}",
            w.name, w.index, w.family, w.analytic, w.numeric, w.rel_error
        );
    }
    let verdict = if report.passed() { "PASS" } else { "FAIL" };
    println!(
        "max relative error {:.3e} (tolerance {:.1e}): {verdict}",
        report.max_rel_error(),
        report.tolerance
    );
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Gradcheck {
            max: report.max_rel_error(),
            tolerance: report.tolerance,
        })
    }
}

struct SweepRow {
    method: &'static str,
    depth: usize,
    bottom: usize,
    top: usize,
    trainable: usize,
    steps: u64,
    loss: f64,
    acc: f64,
}

fn trainable<F: Float>(m: &DepthGrowModel<F>) -> usize {
    m.store()
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(_, p)| p.tensor.numel())
        .sum()
}

/// Trains one model per depth from scratch and writes one CSV row each.
///
/// With `grow`, each depth `d >= 2` also gets a half-depth model (`d / 2`
/// blocks) trained for the same budget and then either directly stacked to
/// `d` blocks and trained further, or grown with `d - d/2` top blocks and
/// trained in stage 2.
pub fn sweep_depth(
    common: &Common,
    data: Option<&Path>,
    depths: &[usize],
    grow: bool,
    out: &Path,
    max_steps: Option<u64>,
) -> Result<()> {
    let mut cfg = prepare(common)?;
    if let Some(s) = max_steps {
        cfg.train.max_steps = s;
    }
    if depths.is_empty() || depths.contains(&0) {
        return Err(CliError::Config("depths must be positive".into()));
    }
    let dir = corpus_dir(&cfg, data)?;
    let vocab = resolve_vocab(&mut cfg, &dir)?;
    let (train, valid) = load_train_valid(&cfg, &dir, &vocab)?;
    if valid.is_empty() {
        return Err(CliError::Config(format!(
            "{} has no validation split",
            dir.display()
        )));
    }
    guard(out, common.overwrite)?;
    let echo = sibling(out, CONFIG_ECHO);
    guard(&echo, common.overwrite)?;
    let rows = at_precision!(
        cfg.model.precision,
        sweep_at(&cfg, depths, grow, &train, &valid)
    )?;
    let mut csv = format!("{SWEEP_HEADER}\n");
    for r in &rows {
        writeln!(
            csv,
            "{},{},{},{},{},{},{:.6},{:.6}",
            r.method, r.depth, r.bottom, r.top, r.trainable, r.steps, r.loss, r.acc
        )
        .expect("string write");
    }
    write_file(out, &csv, common.overwrite)?;
    write_file(&echo, cfg.to_toml(), common.overwrite)?;
    print!("{csv}");
    Ok(())
}

fn sweep_at<F: Float>(
    cfg: &RunConfig,
    depths: &[usize],
    grow: bool,
    train: &[Pair],
    valid: &[Pair],
) -> Result<Vec<SweepRow>> {
    let tc = &cfg.train;
    let seed = cfg.seed();
    let batch = tc.batch_tokens;
    let shallow = |blocks: usize| -> Result<DepthGrowModel<F>> {
        let mc = depthgrow_core::ModelConfig {
            n_bottom_blocks: blocks,
            ..cfg.model.clone()
        };
        let mut m = DepthGrowModel::<F>::new_shallow(&mc, seed)?;
        train_stage1(&mut m, None, train, valid, tc, &mut ())?;
        Ok(m)
    };
    let mut rows = Vec::new();
    for &d in depths {
        eprintln!("depth {d}: ds-scratch");
        let m = shallow(d)?;
        let e = evaluate(&m, valid, View::Shallow, batch)?;
        rows.push(SweepRow {
            method: "ds-scratch",
            depth: d,
            bottom: d,
            top: 0,
            trainable: trainable(&m),
            steps: tc.max_steps,
            loss: e.loss,
            acc: e.accuracy,
        });
        if !grow || d < 2 {
            continue;
        }
        let (n, m_top) = (d / 2, d - d / 2);
        eprintln!("depth {d}: ds-grow and depth-grow from {n} blocks");
        let base = shallow(n)?;

        let mut stacked = base.direct_stack(m_top, seed.wrapping_add(1))?;
        train_stage1(&mut stacked, None, train, valid, tc, &mut ())?;
        let e = evaluate(&stacked, valid, View::Shallow, batch)?;
        rows.push(SweepRow {
            method: "ds-grow",
            depth: d,
            bottom: d,
            top: 0,
            trainable: trainable(&stacked),
            steps: 2 * tc.max_steps,
            loss: e.loss,
            acc: e.accuracy,
        });

        let mut grown = base.grow(m_top, seed.wrapping_add(1), cfg.grow.options())?;
        let mut t2 = tc.clone();
        t2.max_steps = cfg.grow.max_steps.unwrap_or(tc.max_steps);
        train_stage2(&mut grown, None, train, valid, &t2, &mut ())?;
        let e = evaluate(&grown, valid, View::Deep, batch)?;
        rows.push(SweepRow {
            method: "depth-grow",
            depth: d,
            bottom: n,
            top: m_top,
            trainable: trainable(&grown),
            steps: tc.max_steps + t2.max_steps,
            loss: e.loss,
            acc: e.accuracy,
        });
    }
    Ok(rows)
}

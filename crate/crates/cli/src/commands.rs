//! Subcommand implementations. Every command resolves its configuration
//! (flags > file > defaults), does its work through the core crate, and
//! writes all artifacts under the resolved output directory.

use std::path::{Path, PathBuf};

use serde::Serialize;

use flowmem_core::checkpoint::Checkpoint;
use flowmem_core::config::RunConfig;
use flowmem_core::data::{gen_manifold, save_csv_matrix, save_pgm, Dataset, ManifoldKind, ManifoldSpec};
use flowmem_core::diffcore::gradcheck::grad_check;
use flowmem_core::diffcore::layers::{
    swiglu_backward_batch, swiglu_batch, LinearParams, ParamPack, ResidualBlock,
};
use flowmem_core::diffcore::rng::RngStream;
use flowmem_core::flow::{FlowConfig, FlowEncoder};
use flowmem_core::idrp::{IdrpModel, TrainConfig, TrainHistory};
use flowmem_core::membank::MemoryBank;
use flowmem_core::metrics::{
    eval_metrics, psnr_from_mse, psnr_serde, rows_to_csv, rows_to_json, MetricsRow,
    REFERENCE_PSNR_PAIRS,
};
use flowmem_core::pca::{pca_fit, symmetric_eig};
use flowmem_core::predictor::PredictorNet;
use flowmem_core::{CoreError, Tensor};

/// Command failure carrying the process exit code:
/// 1 usage/config, 2 runtime/data, 3 verification.
pub struct CliError {
    pub code: i32,
    pub message: String,
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError {
        code: 1,
        message: e.to_string(),
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError {
        code: 2,
        message: e.to_string(),
    }
}

// ---- Shared plumbing --------------------------------------------------

/// Loads the run configuration and applies flag overrides
/// (flags > file > defaults).
fn load_run_config(
    config: &Option<PathBuf>,
    seed: Option<u64>,
    out: &Option<PathBuf>,
) -> Result<RunConfig, CliError> {
    let mut cfg = match config {
        Some(path) => RunConfig::load(path).map_err(usage)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = out {
        cfg.out_dir = out.display().to_string();
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn ensure_dir(dir: impl Into<PathBuf>) -> Result<PathBuf, CliError> {
    let path = dir.into();
    std::fs::create_dir_all(&path)
        .map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    Ok(path)
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn to_json_pretty(value: &impl Serialize) -> Result<String, CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime)?;
    text.push('\n');
    Ok(text)
}

fn fmt_psnr_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.2}")
    }
}

/// §-listing style one-liner: "PSNR = 15.40 dB, MAE = 0.128622, MSE = 0.028872".
fn fmt_listing(psnr_db: f64, mae: f64, mse: f64) -> String {
    format!(
        "PSNR = {} dB, MAE = {mae:.6}, MSE = {mse:.6}",
        fmt_psnr_db(psnr_db)
    )
}

/// Runs a compress→reconstruct codec over every test row and collects
/// per-sample metrics against the padding-stripped originals.
fn eval_rows(
    test: &Dataset,
    mut codec: impl FnMut(&[f64]) -> Result<Vec<f64>, CoreError>,
) -> Result<Vec<MetricsRow>, CliError> {
    let mut rows = Vec::with_capacity(test.n());
    for i in 0..test.n() {
        let x = test.row(i);
        let x_hat = codec(x).map_err(runtime)?;
        let report = eval_metrics(test.strip_padding(x), test.strip_padding(&x_hat), 1.0)
            .map_err(runtime)?;
        rows.push(MetricsRow::new(i, &report));
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, Serialize)]
struct EvalSummary {
    n: usize,
    #[serde(with = "psnr_serde")]
    mean_psnr_db: f64,
    mean_mae: f64,
    mean_mse: f64,
    /// PSNR of the mean MSE (the aggregate the side-by-side tables quote).
    #[serde(with = "psnr_serde")]
    psnr_of_mean_mse: f64,
}

fn summarize(rows: &[MetricsRow]) -> EvalSummary {
    let nf = rows.len().max(1) as f64;
    let mean_psnr_db = rows.iter().map(|r| r.psnr_db).sum::<f64>() / nf;
    let mean_mae = rows.iter().map(|r| r.mae).sum::<f64>() / nf;
    let mean_mse = rows.iter().map(|r| r.mse).sum::<f64>() / nf;
    EvalSummary {
        n: rows.len(),
        mean_psnr_db,
        mean_mae,
        mean_mse,
        psnr_of_mean_mse: psnr_from_mse(mean_mse, 1.0),
    }
}

/// Initializes and trains an IDRP model on the train split per the config.
/// Returns the model plus both loss histories.
fn train_idrp(
    cfg: &RunConfig,
    train: &Dataset,
) -> Result<(IdrpModel, TrainHistory, TrainHistory), CliError> {
    let mut rng = RngStream::new(cfg.train.seed);
    let mut model = IdrpModel::new(&cfg.model.model_config(), &mut rng).map_err(runtime)?;
    let pretrain = model
        .pretrain_predictor(train.data(), &cfg.train)
        .map_err(runtime)?;
    let joint = model.train_joint(train.data(), &cfg.train).map_err(runtime)?;
    Ok((model, pretrain, joint))
}

fn print_history_tail(phase: &str, history: &TrainHistory) {
    if let Some(last) = history.records.last() {
        println!(
            "{phase}: epoch {} total_loss {:.6e} recon_mse {:.6e} aux_mse {:.6e}",
            last.epoch, last.total_loss, last.recon_mse, last.aux_mse
        );
    }
}

// ---- train ------------------------------------------------------------

pub fn cmd_train(
    config: &Option<PathBuf>,
    seed: Option<u64>,
    out: &Option<PathBuf>,
) -> Result<(), CliError> {
    let cfg = load_run_config(config, seed, out)?;
    let out_dir = ensure_dir(&cfg.out_dir)?;
    let ds = cfg.load_dataset().map_err(runtime)?;
    let (train, test) = ds
        .split(cfg.data.train_fraction, cfg.data.split_seed)
        .map_err(runtime)?;
    println!(
        "data: {} — {} train / {} test, d = {}",
        ds.provenance(),
        train.n(),
        test.n(),
        ds.d()
    );

    let (model, pretrain, joint) = train_idrp(&cfg, &train)?;
    print_history_tail("pretrain", &pretrain);
    print_history_tail("joint", &joint);

    write_file(&out_dir.join("pretrain_history.csv"), &pretrain.to_csv())?;
    write_file(&out_dir.join("train_history.csv"), &joint.to_csv())?;

    let ckpt_path = out_dir.join("checkpoint.json");
    Checkpoint::new_idrp(cfg.clone(), cfg.train.seed, model)
        .save(&ckpt_path)
        .map_err(runtime)?;
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

// ---- eval -------------------------------------------------------------

pub fn cmd_eval(checkpoint: &Path, out: &Option<PathBuf>) -> Result<(), CliError> {
    let ckpt = Checkpoint::load_verified(checkpoint).map_err(runtime)?;
    let cfg = &ckpt.config;
    let out_dir = ensure_dir(match out {
        Some(p) => p.clone(),
        None => PathBuf::from(&cfg.out_dir),
    })?;
    let ds = cfg.load_dataset().map_err(runtime)?;
    let (_train, test) = ds
        .split(cfg.data.train_fraction, cfg.data.split_seed)
        .map_err(runtime)?;

    let rows = match ckpt.kind.as_str() {
        "idrp" | "bank" => {
            let model = ckpt.require_idrp().map_err(runtime)?;
            eval_rows(&test, |x| {
                let z = model.compress(x)?;
                model.reconstruct(&z)
            })?
        }
        "pca" => {
            let model = ckpt
                .pca
                .as_ref()
                .ok_or_else(|| runtime("checkpoint has no PCA model"))?;
            eval_rows(&test, |x| {
                let z = model.compress(x)?;
                model.reconstruct(&z)
            })?
        }
        other => return Err(runtime(format!("cannot evaluate a '{other}' checkpoint"))),
    };

    write_file(&out_dir.join("metrics.csv"), &rows_to_csv(&rows))?;
    let mut rows_json = rows_to_json(&rows);
    rows_json.push('\n');
    write_file(&out_dir.join("metrics.json"), &rows_json)?;
    let summary = summarize(&rows);
    write_file(&out_dir.join("summary.json"), &to_json_pretty(&summary)?)?;

    println!("eval: {} samples ({})", rows.len(), ckpt.kind);
    println!(
        "mean: {}",
        fmt_listing(summary.mean_psnr_db, summary.mean_mae, summary.mean_mse)
    );
    Ok(())
}

// ---- compare ----------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
struct CompareRow {
    sample_id: usize,
    method: &'static str,
    #[serde(with = "psnr_serde")]
    psnr_db: f64,
    mae: f64,
    mse: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
struct CompareSummary {
    n: usize,
    idrp: EvalSummary,
    pca: EvalSummary,
    /// IDRP mean MSE over PCA mean MSE; < 1 means the flow codec wins.
    mse_ratio: f64,
}

fn compare_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from("sample_id,method,psnr_db,mae,mse\n");
    for r in rows {
        let psnr = if r.psnr_db.is_infinite() {
            "inf".to_string()
        } else {
            format!("{:.6}", r.psnr_db)
        };
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            r.sample_id, r.method, psnr, r.mae, r.mse
        ));
    }
    out
}

/// Writes one test sample as original/IDRP/PCA PGM images. Reconstructions
/// are clamped into [0, 1] for display only; metric paths never clamp.
fn write_sample_pgms(
    out_dir: &Path,
    test: &Dataset,
    i: usize,
    shape: (usize, usize),
    idrp_hat: &[f64],
    pca_hat: &[f64],
) -> Result<(), CliError> {
    let (h, w) = shape;
    let clamp = |v: &f64| v.clamp(0.0, 1.0);
    let original = test.strip_padding(test.row(i));
    save_pgm(original, h, w, 255, out_dir.join(format!("sample_{i}_original.pgm")))
        .map_err(runtime)?;
    let idrp_px: Vec<f64> = test.strip_padding(idrp_hat).iter().map(clamp).collect();
    save_pgm(&idrp_px, h, w, 255, out_dir.join(format!("sample_{i}_idrp.pgm")))
        .map_err(runtime)?;
    let pca_px: Vec<f64> = test.strip_padding(pca_hat).iter().map(clamp).collect();
    save_pgm(&pca_px, h, w, 255, out_dir.join(format!("sample_{i}_pca.pgm")))
        .map_err(runtime)?;
    Ok(())
}

pub fn cmd_compare(
    config: &Option<PathBuf>,
    seed: Option<u64>,
    out: &Option<PathBuf>,
) -> Result<(), CliError> {
    let cfg = load_run_config(config, seed, out)?;
    let out_dir = ensure_dir(&cfg.out_dir)?;
    let ds = cfg.load_dataset().map_err(runtime)?;
    let (train, test) = ds
        .split(cfg.data.train_fraction, cfg.data.split_seed)
        .map_err(runtime)?;
    println!(
        "data: {} — {} train / {} test, d = {}",
        ds.provenance(),
        train.n(),
        test.n(),
        ds.d()
    );

    let (idrp, pretrain, joint) = train_idrp(&cfg, &train)?;
    print_history_tail("pretrain", &pretrain);
    print_history_tail("joint", &joint);
    write_file(&out_dir.join("pretrain_history.csv"), &pretrain.to_csv())?;
    write_file(&out_dir.join("train_history.csv"), &joint.to_csv())?;

    let pca = pca_fit(train.data(), cfg.model.m).map_err(runtime)?;

    let idrp_rows = eval_rows(&test, |x| {
        let z = idrp.compress(x)?;
        idrp.reconstruct(&z)
    })?;
    let pca_rows = eval_rows(&test, |x| {
        let z = pca.compress(x)?;
        pca.reconstruct(&z)
    })?;

    let mut rows = Vec::with_capacity(2 * test.n());
    for (ir, pr) in idrp_rows.iter().zip(&pca_rows) {
        rows.push(CompareRow {
            sample_id: ir.sample_id,
            method: "idrp",
            psnr_db: ir.psnr_db,
            mae: ir.mae,
            mse: ir.mse,
        });
        rows.push(CompareRow {
            sample_id: pr.sample_id,
            method: "pca",
            psnr_db: pr.psnr_db,
            mae: pr.mae,
            mse: pr.mse,
        });
    }
    write_file(&out_dir.join("compare.csv"), &compare_csv(&rows))?;
    write_file(&out_dir.join("compare.json"), &to_json_pretty(&rows)?)?;

    let idrp_summary = summarize(&idrp_rows);
    let pca_summary = summarize(&pca_rows);
    let summary = CompareSummary {
        n: test.n(),
        idrp: idrp_summary,
        pca: pca_summary,
        mse_ratio: idrp_summary.mean_mse / pca_summary.mean_mse,
    };
    write_file(&out_dir.join("compare_summary.json"), &to_json_pretty(&summary)?)?;

    // Samples render as images when they carry a shape, or failing that
    // when the unpadded width is a perfect square.
    let shape = test.original_shape().or_else(|| {
        let d0 = test.original_dim();
        let side = (d0 as f64).sqrt().round() as usize;
        (side * side == d0).then_some((side, side))
    });
    if let Some(shape) = shape {
        for i in 0..test.n().min(4) {
            let z = idrp.compress(test.row(i)).map_err(runtime)?;
            let idrp_hat = idrp.reconstruct(&z).map_err(runtime)?;
            let z = pca.compress(test.row(i)).map_err(runtime)?;
            let pca_hat = pca.reconstruct(&z).map_err(runtime)?;
            write_sample_pgms(&out_dir, &test, i, shape, &idrp_hat, &pca_hat)?;
        }
    }

    Checkpoint::new_idrp(cfg.clone(), cfg.train.seed, idrp)
        .save(out_dir.join("idrp_checkpoint.json"))
        .map_err(runtime)?;
    Checkpoint::new_pca(cfg.clone(), cfg.train.seed, pca)
        .save(out_dir.join("pca_checkpoint.json"))
        .map_err(runtime)?;

    println!(
        "idrp: {}",
        fmt_listing(idrp_summary.mean_psnr_db, idrp_summary.mean_mae, idrp_summary.mean_mse)
    );
    println!(
        "pca:  {}",
        fmt_listing(pca_summary.mean_psnr_db, pca_summary.mean_mae, pca_summary.mean_mse)
    );
    println!("mse ratio (idrp / pca) = {:.4}", summary.mse_ratio);
    Ok(())
}

// ---- bank -------------------------------------------------------------

fn script_error(path: &Path, line: usize, reason: impl std::fmt::Display) -> CliError {
    runtime(format!("{}:{line}: {reason}", path.display()))
}

/// Parses a script operand: either a single row index `I` or an
/// end-exclusive range `A..B`.
fn parse_row_range(arg: &str, path: &Path, line: usize) -> Result<(usize, usize), CliError> {
    if let Some((a, b)) = arg.split_once("..") {
        let start: usize = a
            .parse()
            .map_err(|_| script_error(path, line, format!("bad range start '{a}'")))?;
        let end: usize = b
            .parse()
            .map_err(|_| script_error(path, line, format!("bad range end '{b}'")))?;
        if start >= end {
            return Err(script_error(path, line, format!("empty range '{arg}'")));
        }
        Ok((start, end))
    } else {
        let i: usize = arg
            .parse()
            .map_err(|_| script_error(path, line, format!("bad row index '{arg}'")))?;
        Ok((i, i + 1))
    }
}

pub fn cmd_bank(checkpoint: &Path, script: &Path, out: &Option<PathBuf>) -> Result<(), CliError> {
    let ckpt = Checkpoint::load_verified(checkpoint).map_err(runtime)?;
    let model = ckpt.require_idrp().map_err(runtime)?.clone();
    let cfg = ckpt.config.clone();
    let out_dir = ensure_dir(match out {
        Some(p) => p.clone(),
        None => PathBuf::from(&cfg.out_dir),
    })?;
    // Scripts address rows of the full dataset, not a split.
    let ds = cfg.load_dataset().map_err(runtime)?;
    let mut bank = match &ckpt.bank {
        Some(bank) => bank.clone(),
        None => MemoryBank::new(cfg.bank.max_mem, model.m()).map_err(runtime)?,
    };

    let text = std::fs::read_to_string(script)
        .map_err(|e| runtime(format!("{}: {e}", script.display())))?;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let op = parts.next().unwrap_or("");
        let arg = parts
            .next()
            .ok_or_else(|| script_error(script, line_no, "missing operand"))?;
        if let Some(extra) = parts.next() {
            return Err(script_error(
                script,
                line_no,
                format!("unexpected token '{extra}'"),
            ));
        }
        match op {
            "write" => {
                let (start, end) = parse_row_range(arg, script, line_no)?;
                if end > ds.n() {
                    return Err(script_error(
                        script,
                        line_no,
                        format!("row range {start}..{end} exceeds dataset size {}", ds.n()),
                    ));
                }
                let mut batch = Tensor::zeros(vec![end - start, ds.d()]);
                for (k, i) in (start..end).enumerate() {
                    batch.row_mut(k).copy_from_slice(ds.row(i));
                }
                let slot = bank.write(&model, &batch).map_err(runtime)?;
                println!("write {start}..{end} -> slot {slot}  aff {:?}", bank.aff());
            }
            "read" => {
                let i: usize = arg
                    .parse()
                    .map_err(|_| script_error(script, line_no, format!("bad row index '{arg}'")))?;
                if i >= ds.n() {
                    return Err(script_error(
                        script,
                        line_no,
                        format!("row {i} exceeds dataset size {}", ds.n()),
                    ));
                }
                let res = bank.read(&model, ds.row(i)).map_err(runtime)?;
                let report = eval_metrics(
                    ds.strip_padding(ds.row(i)),
                    ds.strip_padding(&res.reconstruction),
                    1.0,
                )
                .map_err(runtime)?;
                println!(
                    "read {i} -> slot {} sim {:.6}  {}  aff {:?}",
                    res.slot,
                    res.similarity,
                    fmt_listing(report.psnr_db, report.mae, report.mse),
                    bank.aff()
                );
            }
            other => {
                return Err(script_error(
                    script,
                    line_no,
                    format!("unknown operation '{other}' (expected write or read)"),
                ));
            }
        }
    }

    println!(
        "bank: {} / {} slots occupied",
        bank.occupied_count(),
        bank.max_mem()
    );
    let bank_path = out_dir.join("bank_checkpoint.json");
    Checkpoint::new_bank(cfg, ckpt.seed, model, bank)
        .save(&bank_path)
        .map_err(runtime)?;
    println!("checkpoint: {}", bank_path.display());
    Ok(())
}

// ---- noise ------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize)]
struct NoiseRowJson {
    sample_id: usize,
    aux_err: f64,
    recon_err: f64,
    #[serde(with = "psnr_serde")]
    psnr: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
struct SweepRow {
    n_layers: usize,
    train_recon_mse: f64,
    train_aux_mse: f64,
    test_recon_mse: f64,
    test_aux_mse: f64,
}

pub fn cmd_noise(checkpoint: &Path, out: &Option<PathBuf>, sweep: bool) -> Result<(), CliError> {
    let ckpt = Checkpoint::load_verified(checkpoint).map_err(runtime)?;
    let model = ckpt.require_idrp().map_err(runtime)?;
    let cfg = &ckpt.config;
    let out_dir = ensure_dir(match out {
        Some(p) => p.clone(),
        None => PathBuf::from(&cfg.out_dir),
    })?;
    let ds = cfg.load_dataset().map_err(runtime)?;
    let (train, test) = ds
        .split(cfg.data.train_fraction, cfg.data.split_seed)
        .map_err(runtime)?;

    let report = model.noise_analysis(test.data());
    write_file(&out_dir.join("noise.csv"), &report.to_csv())?;
    let rows_json: Vec<NoiseRowJson> = report
        .records
        .iter()
        .map(|r| NoiseRowJson {
            sample_id: r.sample_id,
            aux_err: r.aux_err,
            recon_err: r.recon_err,
            psnr: r.psnr,
        })
        .collect();
    write_file(&out_dir.join("noise.json"), &to_json_pretty(&rows_json)?)?;
    write_file(&out_dir.join("noise_summary.json"), &to_json_pretty(&report.summary)?)?;
    println!(
        "noise: {} samples, mean aux_err {:.6e}, mean recon_err {:.6e}, PSNR(mean MSE) = {} dB",
        report.records.len(),
        report.summary.mean_aux_err,
        report.summary.mean_recon_err,
        fmt_psnr_db(report.summary.psnr_of_mean_mse)
    );

    if sweep {
        let mut rows = Vec::new();
        for n_layers in [2usize, 4, 6, 8] {
            let mut cfg_n = cfg.clone();
            cfg_n.model.n_layers = n_layers;
            let (model_n, _pre, _joint) = train_idrp(&cfg_n, &train)?;
            let lambda = cfg_n.train.lambda_aux;
            let (_, train_recon, train_aux) =
                model_n.loss(train.data(), lambda).map_err(runtime)?;
            let (_, test_recon, test_aux) = model_n.loss(test.data(), lambda).map_err(runtime)?;
            println!(
                "sweep N={n_layers}: train recon_mse {train_recon:.6e}, test recon_mse {test_recon:.6e}"
            );
            rows.push(SweepRow {
                n_layers,
                train_recon_mse: train_recon,
                train_aux_mse: train_aux,
                test_recon_mse: test_recon,
                test_aux_mse: test_aux,
            });
        }
        let mut csv =
            String::from("n_layers,train_recon_mse,train_aux_mse,test_recon_mse,test_aux_mse\n");
        for r in &rows {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                r.n_layers, r.train_recon_mse, r.train_aux_mse, r.test_recon_mse, r.test_aux_mse
            ));
        }
        write_file(&out_dir.join("sweep.csv"), &csv)?;
        write_file(&out_dir.join("sweep.json"), &to_json_pretty(&rows)?)?;
    }
    Ok(())
}

// ---- gen-data ---------------------------------------------------------

pub fn cmd_gen_data(
    kind: &str,
    n: usize,
    d: usize,
    k: usize,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let kind = match kind {
        "sinusoidal" => ManifoldKind::Sinusoidal,
        "blobs" => ManifoldKind::Blobs,
        other => {
            return Err(usage(format!(
                "unknown manifold kind '{other}' (expected sinusoidal or blobs)"
            )));
        }
    };
    let spec = ManifoldSpec {
        n,
        d,
        intrinsic_dim: k,
        seed,
        kind,
    };
    let ds = gen_manifold(&spec).map_err(usage)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    save_csv_matrix(ds.data(), out).map_err(runtime)?;
    println!("wrote {} samples, d = {} -> {}", ds.n(), ds.d(), out.display());
    Ok(())
}

// ---- verify -----------------------------------------------------------

type CheckResult = Result<String, String>;

fn rand_tensor(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut RngStream) -> Tensor {
    let mut t = Tensor::zeros(vec![rows, cols]);
    for v in t.data_mut() {
        *v = rng.uniform(lo, hi);
    }
    t
}

/// Adds uniform ±scale noise to every parameter so checks do not run at the
/// identity-like initialization point.
fn perturb_params(pack: &mut impl ParamPack, scale: f64, rng: &mut RngStream) {
    let mut flat = Vec::with_capacity(pack.param_count());
    pack.write_flat(&mut flat);
    for v in &mut flat {
        *v += rng.uniform(-scale, scale);
    }
    let mut pos = 0;
    pack.read_flat(&flat, &mut pos);
}

fn flat_params(pack: &impl ParamPack) -> Vec<f64> {
    let mut flat = Vec::with_capacity(pack.param_count());
    pack.write_flat(&mut flat);
    flat
}

/// Σ (y − target)², the scalar loss every gradient check drives.
fn sq_err(y: &Tensor, target: &Tensor) -> f64 {
    y.data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

/// d/dy of sq_err: 2 (y − target).
fn sq_err_grad(y: &Tensor, target: &Tensor) -> Tensor {
    let mut dy = y.clone();
    for (g, t) in dy.data_mut().iter_mut().zip(target.data()) {
        *g = 2.0 * (*g - t);
    }
    dy
}

const GRAD_TOL: f64 = 1e-5;
const GRAD_PROBE_EPS: f64 = 1e-5;
const GRAD_MAX_COORDS: usize = 64;

fn grad_detail(err: f64) -> CheckResult {
    let detail = format!("max rel err {err:.3e} (tol {GRAD_TOL:.0e})");
    if err < GRAD_TOL {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn check_invertibility(seed: u64) -> CheckResult {
    let mut rng = RngStream::new(seed ^ 0xF10);
    let mut worst = 0.0f64;
    let mut count = 0usize;
    for &d in &[8usize, 64] {
        for &n_layers in &[1usize, 6] {
            let fc = FlowConfig {
                d,
                m: d / 2,
                n_layers,
                hidden: 32,
                residual_blocks: 1,
                s_max: 2.0,
            };
            let mut enc = FlowEncoder::new(&fc, &mut rng).map_err(|e| e.to_string())?;
            perturb_params(&mut enc, 0.1, &mut rng);
            let x = rand_tensor(100, d, 0.0, 1.0, &mut rng);
            let z = enc.forward_batch(&x);
            let x_rt = enc.inverse_batch(&z);
            for (a, b) in x.data().iter().zip(x_rt.data()) {
                worst = worst.max((a - b).abs());
            }
            count += x.rows();
        }
    }
    let detail = format!("max |f⁻¹(f(x)) − x|∞ = {worst:.3e} over {count} round-trips");
    if worst <= 1e-8 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn check_grad_linear(seed: u64) -> CheckResult {
    let mut rng = RngStream::new(seed ^ 0x61);
    let layer = LinearParams::kaiming(4, 6, &mut rng);
    let x = rand_tensor(5, 6, -1.0, 1.0, &mut rng);
    let target = rand_tensor(5, 4, -1.0, 1.0, &mut rng);
    let analytic = {
        let y = layer.forward_batch(&x);
        let dy = sq_err_grad(&y, &target);
        let (_dx, grads) = layer.backward_batch(&x, &dy);
        flat_params(&grads)
    };
    let mut params = flat_params(&layer);
    let err = grad_check(
        |p| {
            let mut probe = layer.clone();
            let mut pos = 0;
            probe.read_flat(p, &mut pos);
            sq_err(&probe.forward_batch(&x), &target)
        },
        &mut params,
        &analytic,
        GRAD_PROBE_EPS,
        &mut rng,
        GRAD_MAX_COORDS,
    )
    .map_err(|e| e.to_string())?;
    grad_detail(err)
}

fn check_grad_swiglu(seed: u64) -> CheckResult {
    let mut rng = RngStream::new(seed ^ 0x62);
    let x = rand_tensor(5, 12, -2.0, 2.0, &mut rng);
    let target = rand_tensor(5, 6, -1.0, 1.0, &mut rng);
    let analytic = {
        let y = swiglu_batch(&x);
        let dy = sq_err_grad(&y, &target);
        swiglu_backward_batch(&x, &dy).data().to_vec()
    };
    // No parameters here: the check runs over the input coordinates.
    let mut coords = x.data().to_vec();
    let err = grad_check(
        |p| {
            let mut probe = x.clone();
            probe.data_mut().copy_from_slice(p);
            sq_err(&swiglu_batch(&probe), &target)
        },
        &mut coords,
        &analytic,
        GRAD_PROBE_EPS,
        &mut rng,
        GRAD_MAX_COORDS,
    )
    .map_err(|e| e.to_string())?;
    grad_detail(err)
}

fn check_grad_residual(seed: u64) -> CheckResult {
    let mut rng = RngStream::new(seed ^ 0x63);
    let block = ResidualBlock::new(6, &mut rng);
    let x = rand_tensor(5, 6, -1.0, 1.0, &mut rng);
    let target = rand_tensor(5, 6, -1.0, 1.0, &mut rng);
    let analytic = {
        let (y, cache) = block.forward_batch(&x);
        let dy = sq_err_grad(&y, &target);
        let (_dx, grads) = block.backward_batch(&x, &cache, &dy);
        flat_params(&grads)
    };
    let mut params = flat_params(&block);
    let err = grad_check(
        |p| {
            let mut probe = block.clone();
            let mut pos = 0;
            probe.read_flat(p, &mut pos);
            let (y, _) = probe.forward_batch(&x);
            sq_err(&y, &target)
        },
        &mut params,
        &analytic,
        GRAD_PROBE_EPS,
        &mut rng,
        GRAD_MAX_COORDS,
    )
    .map_err(|e| e.to_string())?;
    grad_detail(err)
}

fn check_grad_coupling(seed: u64) -> CheckResult {
    let mut rng = RngStream::new(seed ^ 0x64);
    let fc = FlowConfig {
        d: 8,
        m: 4,
        n_layers: 2,
        hidden: 16,
        residual_blocks: 1,
        s_max: 2.0,
    };
    let mut enc = FlowEncoder::new(&fc, &mut rng).map_err(|e| e.to_string())?;
    perturb_params(&mut enc, 0.1, &mut rng);
    let x = rand_tensor(5, 8, 0.0, 1.0, &mut rng);
    let target = rand_tensor(5, 8, 0.0, 1.0, &mut rng);
    let analytic = {
        let (z, cache) = enc.forward_batch_cached(&x);
        let dz = sq_err_grad(&z, &target);
        let (_dx, grads) = enc.backward_batch(&cache, &dz);
        let mut flat = Vec::new();
        for g in &grads.0 {
            g.write_flat(&mut flat);
        }
        flat
    };
    let mut params = flat_params(&enc);
    let err = grad_check(
        |p| {
            let mut probe = enc.clone();
            let mut pos = 0;
            probe.read_flat(p, &mut pos);
            sq_err(&probe.forward_batch(&x), &target)
        },
        &mut params,
        &analytic,
        GRAD_PROBE_EPS,
        &mut rng,
        GRAD_MAX_COORDS,
    )
    .map_err(|e| e.to_string())?;
    grad_detail(err)
}

fn check_grad_predictor(seed: u64) -> CheckResult {
    let mut rng = RngStream::new(seed ^ 0x65);
    let net = PredictorNet::new(4, 4, 16, &mut rng).map_err(|e| e.to_string())?;
    let zc = rand_tensor(5, 4, -1.0, 1.0, &mut rng);
    let target = rand_tensor(5, 4, -1.0, 1.0, &mut rng);
    let analytic = {
        let (y, cache) = net.forward_batch_cached(&zc);
        let dy = sq_err_grad(&y, &target);
        let (_dz, grads) = net.backward_batch(&cache, &dy);
        flat_params(&grads)
    };
    let mut params = flat_params(&net);
    let err = grad_check(
        |p| {
            let mut probe = net.clone();
            let mut pos = 0;
            probe.read_flat(p, &mut pos);
            sq_err(&probe.forward_batch(&zc), &target)
        },
        &mut params,
        &analytic,
        GRAD_PROBE_EPS,
        &mut rng,
        GRAD_MAX_COORDS,
    )
    .map_err(|e| e.to_string())?;
    grad_detail(err)
}

fn small_model_section() -> flowmem_core::config::ModelSection {
    let mut section = flowmem_core::config::ModelSection::default();
    section.d = 8;
    section.m = 4;
    section.n_layers = 2;
    section.hidden = 16;
    section.predictor_hidden = 16;
    section.residual_blocks = 1;
    section.s_max = 2.0;
    section
}

fn check_grad_joint(seed: u64) -> CheckResult {
    let mut rng = RngStream::new(seed ^ 0x66);
    let mut model = IdrpModel::new(&small_model_section().model_config(), &mut rng)
        .map_err(|e| e.to_string())?;
    perturb_params(&mut model, 0.1, &mut rng);
    let batch = rand_tensor(6, 8, 0.0, 1.0, &mut rng);
    let lambda = 1.0;
    let (_, _, _, analytic) = model.loss_backward(&batch, lambda, true);
    let mut params = model.flatten_params();
    let err = grad_check(
        |p| {
            let mut probe = model.clone();
            probe.assign_params(p).expect("probe param shape");
            probe.loss(&batch, lambda).expect("probe loss").0
        },
        &mut params,
        &analytic,
        GRAD_PROBE_EPS,
        &mut rng,
        GRAD_MAX_COORDS,
    )
    .map_err(|e| e.to_string())?;
    grad_detail(err)
}

fn check_pca_oracle(seed: u64) -> CheckResult {
    let mut rng = RngStream::new(seed ^ 0x9CA);
    let (n, d, m) = (50usize, 10usize, 4usize);
    let data = rand_tensor(n, d, 0.0, 1.0, &mut rng);
    let model = pca_fit(&data, m).map_err(|e| e.to_string())?;

    // Brute-force covariance eigendecomposition as the oracle.
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for (acc, v) in mean.iter_mut().zip(data.row(i)) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= n as f64;
    }
    let mut centered = data.clone();
    for i in 0..n {
        for (v, mu) in centered.row_mut(i).iter_mut().zip(&mean) {
            *v -= mu;
        }
    }
    let mut cov = centered
        .transposed()
        .matmul(&centered)
        .map_err(|e| e.to_string())?;
    for v in cov.data_mut() {
        *v /= (n - 1) as f64;
    }
    let (evals, evecs) = symmetric_eig(&cov).map_err(|e| e.to_string())?;

    let mut max_eval_dev = 0.0f64;
    for j in 0..m {
        max_eval_dev = max_eval_dev.max((model.explained_variance[j] - evals[j]).abs());
    }

    // Principal angles between the fitted and oracle top-m subspaces, via
    // the eigenvalues (= cos²θ) of Gram(componentsᵀ · V_top).
    let mut v_top = Tensor::zeros(vec![d, m]);
    for i in 0..d {
        for j in 0..m {
            v_top.row_mut(i)[j] = evecs.row(i)[j];
        }
    }
    let cross = model
        .components
        .transposed()
        .matmul(&v_top)
        .map_err(|e| e.to_string())?;
    let gram = cross.transposed().matmul(&cross).map_err(|e| e.to_string())?;
    let (cos_sq, _) = symmetric_eig(&gram).map_err(|e| e.to_string())?;
    let mut max_angle = 0.0f64;
    for &c in &cos_sq {
        max_angle = max_angle.max(c.clamp(0.0, 1.0).sqrt().acos());
    }

    let detail = format!(
        "eigenvalue dev {max_eval_dev:.3e} (tol 1e-8), principal angle {max_angle:.3e} rad (tol 1e-6)"
    );
    if max_eval_dev <= 1e-8 && max_angle <= 1e-6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn check_psnr_table() -> CheckResult {
    let mut worst = 0.0f64;
    let mut ok = true;
    for &(mse, printed, tol) in REFERENCE_PSNR_PAIRS {
        let dev = (psnr_from_mse(mse, 1.0) - printed).abs();
        worst = worst.max(dev);
        ok &= dev <= tol;
    }
    let detail = format!(
        "{} reference pairs, worst |Δ| = {worst:.4} dB",
        REFERENCE_PSNR_PAIRS.len()
    );
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn check_determinism(seed: u64) -> CheckResult {
    let spec = ManifoldSpec {
        n: 32,
        d: 8,
        intrinsic_dim: 2,
        seed: 7,
        kind: ManifoldKind::Sinusoidal,
    };
    let data = gen_manifold(&spec).map_err(|e| e.to_string())?;
    let tcfg = TrainConfig {
        epochs: 3,
        pretrain_epochs: 2,
        batch_size: 16,
        lr: 1e-3,
        lambda_aux: 1.0,
        seed,
        train_flow: true,
        log_every: 1,
    };
    let run = || -> Result<Vec<f64>, String> {
        let mut rng = RngStream::new(seed);
        let mut model = IdrpModel::new(&small_model_section().model_config(), &mut rng)
            .map_err(|e| e.to_string())?;
        model
            .pretrain_predictor(data.data(), &tcfg)
            .map_err(|e| e.to_string())?;
        model
            .train_joint(data.data(), &tcfg)
            .map_err(|e| e.to_string())?;
        Ok(model.flatten_params())
    };
    let a = run()?;
    let b = run()?;
    let identical = a.len() == b.len()
        && a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
    let detail = format!("two training runs, {} parameters compared bitwise", a.len());
    if identical {
        Ok(detail)
    } else {
        Err("repeated training run produced different parameters".to_string())
    }
}

/// Saves a checkpoint, tampers with one weight without refreshing the
/// digest, and confirms the model still inverts exactly while digest
/// verification rejects the file.
fn check_checkpoint_digest(seed: u64, scratch: &Path) -> CheckResult {
    std::fs::create_dir_all(scratch).map_err(|e| format!("{}: {e}", scratch.display()))?;
    let mut cfg = RunConfig::default();
    cfg.model = small_model_section();
    cfg.data.source = flowmem_core::data::DataSource::Manifold(ManifoldSpec {
        n: 32,
        d: 8,
        intrinsic_dim: 2,
        seed: 7,
        kind: ManifoldKind::Sinusoidal,
    });

    let mut rng = RngStream::new(seed ^ 0xD16);
    let mut model =
        IdrpModel::new(&cfg.model.model_config(), &mut rng).map_err(|e| e.to_string())?;
    perturb_params(&mut model, 0.1, &mut rng);
    let path = scratch.join("verify_checkpoint.json");
    Checkpoint::new_idrp(cfg, seed, model)
        .save(&path)
        .map_err(|e| e.to_string())?;
    Checkpoint::load_verified(&path).map_err(|e| format!("clean checkpoint rejected: {e}"))?;

    let mut tampered = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    {
        let model = tampered.idrp.as_mut().ok_or("checkpoint lost its model")?;
        let mut flat = model.flatten_params();
        flat[0] += 1e-3;
        model.assign_params(&flat).map_err(|e| e.to_string())?;
    }
    let tampered_path = scratch.join("verify_checkpoint_tampered.json");
    tampered.save(&tampered_path).map_err(|e| e.to_string())?;

    // The corrupted model is still a valid flow: round-trips stay exact.
    let reloaded = Checkpoint::load(&tampered_path).map_err(|e| e.to_string())?;
    let model = reloaded.idrp.as_ref().ok_or("tampered checkpoint lost its model")?;
    let x = rand_tensor(20, 8, 0.0, 1.0, &mut rng);
    let z = model.encoder.forward_batch(&x);
    let x_rt = model.encoder.inverse_batch(&z);
    let mut worst = 0.0f64;
    for (a, b) in x.data().iter().zip(x_rt.data()) {
        worst = worst.max((a - b).abs());
    }
    if worst > 1e-8 {
        return Err(format!(
            "tampered model no longer inverts (round-trip err {worst:.3e})"
        ));
    }
    match Checkpoint::load_verified(&tampered_path) {
        Err(CoreError::Checkpoint(_)) => Ok(format!(
            "tampered weight keeps invertibility ({worst:.3e}) but fails digest verification"
        )),
        Err(e) => Err(format!("unexpected error kind: {e}")),
        Ok(_) => Err("tampered checkpoint passed digest verification".to_string()),
    }
}

pub fn cmd_verify(
    config: &Option<PathBuf>,
    seed: Option<u64>,
    out: &Option<PathBuf>,
) -> Result<(), CliError> {
    let cfg = load_run_config(config, seed, out)?;
    let seed = cfg.train.seed;
    let scratch = PathBuf::from(&cfg.out_dir).join("verify_scratch");

    let checks: Vec<(&str, CheckResult)> = vec![
        ("invertibility", check_invertibility(seed)),
        ("grad-linear", check_grad_linear(seed)),
        ("grad-swiglu", check_grad_swiglu(seed)),
        ("grad-residual", check_grad_residual(seed)),
        ("grad-coupling", check_grad_coupling(seed)),
        ("grad-predictor", check_grad_predictor(seed)),
        ("grad-joint", check_grad_joint(seed)),
        ("pca-oracle", check_pca_oracle(seed)),
        ("psnr-table", check_psnr_table()),
        ("determinism", check_determinism(seed)),
        ("checkpoint-digest", check_checkpoint_digest(seed, &scratch)),
    ];

    let total = checks.len();
    let mut failed = 0usize;
    for (name, result) in checks {
        match result {
            Ok(detail) => println!("PASS {name:<18} {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name:<18} {detail}");
            }
        }
    }
    if failed == 0 {
        println!("verify: all {total} checks passed");
        Ok(())
    } else {
        Err(CliError {
            code: 3,
            message: format!("verification failed ({failed} of {total} checks)"),
        })
    }
}

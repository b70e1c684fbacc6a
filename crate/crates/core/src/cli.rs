//! The `kha` command-line tool.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, TensorData};
use crate::error::{Error, Result};
use crate::flops::{FlopsInput, FlopsReport};
use crate::model::AnyModel;
use crate::runspec::RunSpec;
use crate::tensor::set_intra_op_threads;
use crate::trainer::{compare_runs, train_any, RunRecord};

/// Largest logit difference `absorb --verify` accepts.
pub const ABSORB_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Parser)]
#[command(name = "kha", version, about = "Knocking-heads attention toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a byte-level language model.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for model.khac, loss.csv and run.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two run.json records (ΔL = B − A).
    Compare {
        run_a: PathBuf,
        run_b: PathBuf,
        /// Per-step comparison CSV.
        #[arg(long, default_value = "compare.csv")]
        out: PathBuf,
    },
    /// Fold linear knocking matrices into the attention projections.
    Absorb {
        input: PathBuf,
        output: PathBuf,
        /// Check absorbed and original logits agree on a random probe batch.
        #[arg(long)]
        verify: bool,
    },
    /// Per-layer training FLOPs.
    Flops {
        #[arg(long = "L")]
        seq_len: u64,
        #[arg(long)]
        d: u64,
        #[arg(long)]
        n: u64,
        #[arg(long = "dff-ratio", default_value_t = 3)]
        dff_ratio: u64,
        /// Also write the report as JSON (`-` for stdout).
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Export a knocking matrix as CSV and optionally as an 8-bit PGM.
    ExportHeatmap {
        model: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long, value_enum)]
        matrix: MatrixKind,
        /// Site of the up/gate/down matrices.
        #[arg(long, default_value = "v")]
        site: SiteArg,
        csv: PathBuf,
        pgm: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MatrixKind {
    Tq,
    Tk,
    Tv,
    Up,
    Gate,
    Down,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SiteArg {
    Q,
    K,
    V,
}

impl MatrixKind {
    /// Checkpoint tensor name for `layer`.
    pub fn tensor_name(self, layer: usize, site: SiteArg) -> String {
        let s = match site {
            SiteArg::Q => 'q',
            SiteArg::K => 'k',
            SiteArg::V => 'v',
        };
        let tail = match self {
            MatrixKind::Tq => "q.t".to_string(),
            MatrixKind::Tk => "k.t".to_string(),
            MatrixKind::Tv => "v.t".to_string(),
            MatrixKind::Up => format!("{s}.up"),
            MatrixKind::Gate => format!("{s}.gate"),
            MatrixKind::Down => format!("{s}.down"),
        };
        format!("layers.{layer}.attn.kha.{tail}")
    }
}

/// Parses `KHA_THREADS`; unset means one thread.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("KHA_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::InvalidConfig(format!(
                "KHA_THREADS must be a positive integer, got `{v}`"
            ))),
        },
    }
}

pub fn run(cli: Cli) -> Result<()> {
    set_intra_op_threads(threads_from_env()?);
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Train { config, out: dir } => cmd_train(&config, &dir, &mut out),
        Command::Compare {
            run_a,
            run_b,
            out: csv,
        } => cmd_compare(&run_a, &run_b, &csv, &mut out),
        Command::Absorb {
            input,
            output,
            verify,
        } => cmd_absorb(&input, &output, verify, &mut out),
        Command::Flops {
            seq_len,
            d,
            n,
            dff_ratio,
            json,
        } => cmd_flops(
            FlopsInput {
                seq_len,
                d,
                n_heads: n,
                d_ff_ratio: dff_ratio,
            },
            json.as_deref(),
            &mut out,
        ),
        Command::ExportHeatmap {
            model,
            layer,
            matrix,
            site,
            csv,
            pgm,
        } => cmd_export_heatmap(&model, layer, matrix, site, &csv, pgm.as_deref(), &mut out),
    }
}

pub fn cmd_train(config: &Path, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let spec = RunSpec::load(config)?;
    let corpus = fs::read(&spec.corpus_path).map_err(|e| {
        Error::InvalidConfig(format!(
            "cannot read corpus {}: {e}",
            spec.corpus_path.display()
        ))
    })?;
    fs::create_dir_all(dir)?;
    let every = (spec.train.steps / 20).max(1);
    let (record, model) = train_any(&spec.model, &spec.train, &corpus, &mut |s| {
        if s.step % every == 0 || s.step + 1 == s.steps {
            eprintln!(
                "step {:>6}/{}  loss {:.4}  lr {:.3e}  |g| {:.3}",
                s.step, s.steps, s.loss, s.lr, s.grad_norm
            );
        }
    })?;
    model.to_checkpoint().save(dir.join("model.khac"))?;
    fs::write(dir.join("loss.csv"), record.to_csv())?;
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(&record)?)?;
    match record.final_loss {
        Some(f) => writeln!(
            out,
            "trained {} steps: initial loss {:.4}, final loss {:.4}, spikes {}",
            record.losses.len(),
            record.losses[0],
            f,
            record.spike_count
        )?,
        None => writeln!(out, "trained 0 steps")?,
    }
    writeln!(out, "wrote {}", dir.display())?;
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or("n/a".to_string(), |v| format!("{v:.3}"))
}

pub fn cmd_compare(a: &Path, b: &Path, csv: &Path, out: &mut dyn Write) -> Result<()> {
    let ra: RunRecord = serde_json::from_str(&fs::read_to_string(a)?)?;
    let rb: RunRecord = serde_json::from_str(&fs::read_to_string(b)?)?;
    let r = compare_runs(&ra, &rb)?;
    writeln!(out, "{:<12}{:>10}{:>10}", "", "A", "B")?;
    writeln!(
        out,
        "{:<12}{:>10}{:>10}",
        "final_loss",
        fmt_opt(r.final_a),
        fmt_opt(r.final_b)
    )?;
    writeln!(out, "{:<12}{:>10}{:>10}", "spikes", r.spikes_a, r.spikes_b)?;
    writeln!(out, "ΔL = {}", fmt_opt(r.delta_final))?;
    writeln!(out, "Δspikes = {}", r.delta_spikes)?;
    let mut text = String::from("step,loss_a,loss_b,diff\n");
    for (i, ((x, y), d)) in ra.losses.iter().zip(&rb.losses).zip(&r.diff).enumerate() {
        text.push_str(&format!("{i},{x},{y},{d}\n"));
    }
    fs::write(csv, text)?;
    Ok(())
}

/// Deterministic probe tokens for `absorb --verify`.
pub fn probe_tokens(vocab: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0AB5_0A8B);
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

/// Largest absolute logit difference between two models on `tokens`.
pub fn max_logit_diff(a: &AnyModel, b: &AnyModel, tokens: &[usize], seq_len: usize) -> Result<f64> {
    match (a, b) {
        (AnyModel::F32(x), AnyModel::F32(y)) => Ok(x
            .logits(tokens, seq_len)?
            .max_abs_diff(&y.logits(tokens, seq_len)?)),
        (AnyModel::F64(x), AnyModel::F64(y)) => Ok(x
            .logits(tokens, seq_len)?
            .max_abs_diff(&y.logits(tokens, seq_len)?)),
        _ => Err(Error::Unsupported(
            "models have different element types".into(),
        )),
    }
}

pub fn cmd_absorb(input: &Path, output: &Path, verify: bool, out: &mut dyn Write) -> Result<()> {
    let model = AnyModel::from_checkpoint(&Checkpoint::load(input)?)?;
    let absorbed = model.absorb()?;
    if verify {
        let seq_len = 16;
        let tokens = probe_tokens(model.config().vocab, 2 * seq_len);
        let diff = max_logit_diff(&model, &absorbed, &tokens, seq_len)?;
        writeln!(out, "max |Δ| = {diff:.3e}")?;
        if diff.is_nan() || diff >= ABSORB_TOLERANCE {
            return Err(Error::Verification(format!(
                "absorbed logits differ by {diff:.3e} (tolerance {ABSORB_TOLERANCE:.0e})"
            )));
        }
    }
    absorbed.to_checkpoint().save(output)?;
    writeln!(out, "wrote {}", output.display())?;
    Ok(())
}

pub fn cmd_flops(input: FlopsInput, json: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let report = FlopsReport::compute(input)?;
    write!(out, "{}", report.render())?;
    if let Some(path) = json {
        let text = serde_json::to_string_pretty(&report)?;
        if path == Path::new("-") {
            writeln!(out, "{text}")?;
        } else {
            fs::write(path, text)?;
        }
    }
    Ok(())
}

/// Matrix values for export: clipped to `[0, 1]` unless `raw`.
pub fn heatmap_values(data: &TensorData, raw: bool) -> Vec<f64> {
    let clip = |x: f64| if raw { x } else { x.clamp(0.0, 1.0) };
    data.to_f64().into_iter().map(clip).collect()
}

/// CSV with header `c0,c1,...` and one line per matrix row.
pub fn heatmap_csv(data: &TensorData, cols: usize, raw: bool) -> String {
    let cells: Vec<String> = match data {
        TensorData::F32(v) => v
            .iter()
            .map(|&x| if raw { x } else { x.clamp(0.0, 1.0) })
            .map(|x| format!("{x:?}"))
            .collect(),
        TensorData::F64(v) => v
            .iter()
            .map(|&x| if raw { x } else { x.clamp(0.0, 1.0) })
            .map(|x| format!("{x:?}"))
            .collect(),
    };
    let header: Vec<String> = (0..cols).map(|c| format!("c{c}")).collect();
    let mut s = header.join(",");
    s.push('\n');
    for row in cells.chunks(cols) {
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Binary (P5) 8-bit PGM. Clipped matrices map `[0, 1]` linearly to
/// `0..=255`; raw matrices map their own min..max.
pub fn heatmap_pgm(values: &[f64], rows: usize, cols: usize, raw: bool) -> Vec<u8> {
    let (lo, hi) = if raw {
        values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| {
                (l.min(x), h.max(x))
            })
    } else {
        (0.0, 1.0)
    };
    let span = hi - lo;
    let mut bytes = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|&x| {
        let u = if span > 0.0 { (x - lo) / span } else { 0.0 };
        (u.clamp(0.0, 1.0) * 255.0).round() as u8
    }));
    bytes
}

pub fn cmd_export_heatmap(
    model: &Path,
    layer: usize,
    matrix: MatrixKind,
    site: SiteArg,
    csv: &Path,
    pgm: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let ckpt = Checkpoint::load(model)?;
    let name = matrix.tensor_name(layer, site);
    let entry = ckpt.require(&name)?;
    let &[rows, cols] = entry.dims.as_slice() else {
        return Err(Error::Checkpoint(format!("`{name}` is not a matrix")));
    };
    let raw = matrix == MatrixKind::Gate;
    fs::write(csv, heatmap_csv(&entry.data, cols, raw))?;
    if let Some(p) = pgm {
        fs::write(
            p,
            heatmap_pgm(&heatmap_values(&entry.data, raw), rows, cols, raw),
        )?;
    }
    writeln!(out, "exported {name} ({rows}x{cols}) to {}", csv.display())?;
    Ok(())
}

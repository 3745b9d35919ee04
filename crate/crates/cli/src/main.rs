use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use candle_core::Device;
use clap::{Args, Parser, Subcommand, ValueEnum};
use tttse_core::config::RunConfig;
use tttse_core::dataset::{Dataset, Utterance, LEXICON_FILE};
use tttse_core::evaluation::{plot_panels, run_protocol, write_protocol_csv, McdConfig, Panel, PlotConfig, TttSetting};
use tttse_core::features::{write_wav, StftConfig};
use tttse_core::pipeline::{plan_edit, read_mel, reconstruct_audio, run_edit, write_mel, EditOptions, EditRequest, EditSpan};
use tttse_core::text::Lexicon;
use tttse_core::toy::{write_corpus, ToyCorpusConfig};
use tttse_core::training::{train_loop, Pretrained};
use tttse_core::ttt::TttConfig;

/// Diffusion speech editing with per-instance test-time training.
#[derive(Parser)]
#[command(name = "tttse", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic toy corpus.
    Synth(SynthArgs),
    /// Train (or resume) a model on a dataset directory.
    Train(TrainArgs),
    /// Edit one utterance.
    Edit(EditArgs),
    /// Run the middle-third reconstruction protocol.
    Eval(EvalArgs),
    /// Render spectrograms to PNG.
    Plot(PlotArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 160)]
    utterances: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Toy,
    Full,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TOML run configuration; overrides `--preset`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "toy")]
    preset: Preset,
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Args, Clone)]
struct TttArgs {
    /// Adaptation steps per stage.
    #[arg(long)]
    ttt_steps: Option<usize>,
    /// Masked variants per stage.
    #[arg(long)]
    ttt_variants: Option<usize>,
    #[arg(long)]
    skip_ttt_dp: bool,
    #[arg(long)]
    skip_ttt_sd: bool,
}

impl TttArgs {
    fn config(&self, base: &TttConfig) -> TttConfig {
        let mut c = base.clone();
        if let Some(s) = self.ttt_steps {
            c.steps = s;
        }
        if let Some(v) = self.ttt_variants {
            c.variants = v;
        }
        c
    }
}

#[derive(Args, Clone)]
struct SourceArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    wav: PathBuf,
    #[arg(long)]
    align: PathBuf,
    /// Pronouncing lexicon; defaults to `lexicon.tsv` beside the waveform.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Word span `START:END`, end exclusive; `START:START` inserts.
    #[arg(long, conflicts_with = "phone_span")]
    span: Option<String>,
    /// Phoneme span `START:END`, end exclusive.
    #[arg(long)]
    phone_span: Option<String>,
    /// Replacement text; empty deletes. Omit to regenerate the span as is.
    #[arg(long)]
    text: Option<String>,
    /// Explicit edit length in frames.
    #[arg(long)]
    target_frames: Option<usize>,
    /// Turn off exact length projection for an explicit `--target-frames`.
    #[arg(long)]
    no_project: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    ttt: TttArgs,
}

#[derive(Args)]
struct EditArgs {
    #[command(flatten)]
    src: SourceArgs,
    #[arg(long)]
    rate: Option<f64>,
    /// Output directory for `edited.mel`, `report.json` and `edited.wav`.
    #[arg(long)]
    out: PathBuf,
    /// Griffin-Lim iterations for `edited.wav`; omit to skip audio.
    #[arg(long)]
    griffin_lim: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Protocol {
    MiddleThird,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "middle-third")]
    protocol: Protocol,
    #[arg(long, default_value_t = 10)]
    n_utts: usize,
    /// Evaluate only every K-th utterance (the held-out split).
    #[arg(long)]
    every: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    csv: PathBuf,
    /// Align frames by DTW inside MCD.
    #[arg(long)]
    dtw: bool,
    /// Also write the report with summary statistics as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    #[command(flatten)]
    ttt: TttArgs,
}

#[derive(Args)]
struct PlotArgs {
    /// `TTTSE-MEL-v1` files, one panel each.
    #[arg(long)]
    mel: Vec<PathBuf>,
    /// Edited frames `START:END` per `--mel`, in order.
    #[arg(long)]
    edit: Vec<String>,
    #[arg(long)]
    png: PathBuf,
    #[arg(long, default_value_t = 2)]
    px_per_frame: usize,
    #[arg(long, default_value_t = 2)]
    px_per_band: usize,
    /// Edit at each comma-separated rate and stack the results.
    #[arg(long, value_delimiter = ',', requires = "ckpt")]
    rates: Vec<f64>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, requires = "ckpt")]
    wav: Option<PathBuf>,
    #[arg(long, requires = "ckpt")]
    align: Option<PathBuf>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    span: Option<String>,
    #[arg(long)]
    phone_span: Option<String>,
    #[arg(long)]
    text: Option<String>,
    #[arg(long)]
    target_frames: Option<usize>,
    #[arg(long)]
    no_project: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    ttt: TttArgs,
}

fn parse_range(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s.split_once(':').with_context(|| format!("range `{s}` is not START:END"))?;
    Ok((a.trim().parse()?, b.trim().parse()?))
}

fn load_pretrained(path: &Path) -> Result<Pretrained> {
    Pretrained::load(path, &Device::Cpu).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_lexicon(explicit: Option<&Path>, wav: &Path) -> Result<Option<Lexicon>> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => wav.with_file_name(LEXICON_FILE),
    };
    if explicit.is_some() || path.exists() {
        Ok(Some(Lexicon::load(&path)?))
    } else {
        Ok(None)
    }
}

fn request(utt: &Utterance, span: Option<&str>, phone_span: Option<&str>, text: Option<&str>, target: Option<usize>, no_project: bool, rate: Option<f64>) -> Result<EditRequest> {
    let span = match (span, phone_span) {
        (Some(s), _) => {
            let (a, b) = parse_range(s)?;
            EditSpan::Words(a, b)
        }
        (None, Some(s)) => {
            let (a, b) = parse_range(s)?;
            EditSpan::Phonemes(a, b)
        }
        (None, None) => bail!("one of --span or --phone-span is required"),
    };
    Ok(EditRequest {
        text: text.map(str::to_string),
        rate,
        target_frames: target,
        project: target.map(|_| !no_project),
        ..EditRequest::new(&utt.id, span)
    })
}

fn edit_options(pre: &Pretrained, ttt: &TttArgs, seed: u64) -> EditOptions {
    EditOptions {
        ttt: ttt.config(&pre.config.ttt),
        skip_dp: ttt.skip_ttt_dp,
        skip_sd: ttt.skip_ttt_sd,
        seed,
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = ToyCorpusConfig {
        utterances: a.utterances,
        seed: a.seed,
        ..Default::default()
    };
    let ids = write_corpus(&a.out, &cfg, &StftConfig::default())?;
    println!("wrote {} utterances to {}", ids.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match (&a.config, a.preset) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Preset::Toy) => RunConfig::toy(),
        (None, Preset::Full) => RunConfig::default(),
    };
    if let Some(s) = a.steps {
        cfg.train.total_steps = s;
    }
    let ck = train_loop(&a.data, &cfg, &a.out, &StftConfig::default())?;
    println!("checkpoint {}", ck.display());
    Ok(())
}

fn edit(a: EditArgs) -> Result<()> {
    let s = &a.src;
    let pre = load_pretrained(&s.ckpt)?;
    let utt = Utterance::load_files(&s.wav, &s.align, &pre.stft)?;
    let lex = load_lexicon(s.lexicon.as_deref(), &s.wav)?;
    let req = request(&utt, s.span.as_deref(), s.phone_span.as_deref(), s.text.as_deref(), s.target_frames, s.no_project, a.rate)?;
    let plan = plan_edit(&utt, lex.as_ref(), &req)?;
    let out = run_edit(&pre, &utt, &plan, &edit_options(&pre, &s.ttt, s.seed))?;
    std::fs::create_dir_all(&a.out)?;
    write_mel(&a.out.join("edited.mel"), &out.mel)?;
    serde_json::to_writer_pretty(BufWriter::new(File::create(a.out.join("report.json"))?), &out.report)?;
    if let Some(iters) = a.griffin_lim {
        let wav = reconstruct_audio(&out.mel, &pre.stft, iters)?;
        write_wav(&a.out.join("edited.wav"), &wav, pre.stft.sample_rate)?;
    }
    let (e0, e1) = out.report.output_frames;
    println!(
        "edited frames {e0}..{e1} ({} realized, target {}), output {} frames",
        out.report.realized_frames, out.report.target_frames, out.report.output_width
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let Protocol::MiddleThird = a.protocol;
    let pre = load_pretrained(&a.ckpt)?;
    let data = Dataset::load(&a.data, &pre.stft)?;
    let utts: Vec<&Utterance> = match a.every {
        Some(k) => data.split_every(k).1,
        None => data.utterances.iter().collect(),
    };
    let ttt = a.ttt.config(&pre.config.ttt);
    let on = TttSetting {
        dp: !a.ttt.skip_ttt_dp,
        sd: !a.ttt.skip_ttt_sd,
    };
    let mut settings = vec![TttSetting::ALL_OFF];
    if on != TttSetting::ALL_OFF {
        settings.push(on);
    }
    let mcd = McdConfig {
        use_dtw: a.dtw,
        ..Default::default()
    };
    let report = run_protocol(&pre, &utts, &ttt, &settings, a.n_utts, a.seed, &mcd)?;
    write_protocol_csv(&report, BufWriter::new(File::create(&a.csv)?))?;
    if let Some(p) = &a.json {
        serde_json::to_writer_pretty(BufWriter::new(File::create(p)?), &report)?;
    }
    for s in &report.summary {
        let fmt = |m: Option<tttse_core::evaluation::MeanStd>| m.map_or("n/a".to_string(), |m| format!("{:.3} ± {:.3}", m.mean, m.std));
        println!(
            "dp={} sd={}: {} utterances, mcd full {}, mcd edit {}, dur mae {}",
            s.setting.dp,
            s.setting.sd,
            s.evaluated,
            fmt(s.mcd_full_db),
            fmt(s.mcd_edit_db),
            fmt(s.dur_mae)
        );
    }
    if !report.failures.is_empty() {
        eprintln!("{} failed evaluation(s):", report.failures.len());
        for f in &report.failures {
            eprintln!("  {}: {}", f.utt_id, f.error);
        }
    }
    Ok(())
}

fn plot(a: PlotArgs) -> Result<()> {
    let cfg = PlotConfig {
        px_per_frame: a.px_per_frame,
        px_per_band: a.px_per_band,
    };
    let mut mels = Vec::new();
    let mut boxes = Vec::new();
    if a.rates.is_empty() {
        if a.mel.is_empty() {
            bail!("nothing to plot: pass --mel or --rates");
        }
        if a.edit.len() > a.mel.len() {
            bail!("more --edit ranges than --mel files");
        }
        for (i, p) in a.mel.iter().enumerate() {
            mels.push(read_mel(p)?);
            boxes.push(a.edit.get(i).map(|s| parse_range(s)).transpose()?);
        }
    } else {
        let (Some(ck), Some(wav), Some(align)) = (&a.ckpt, &a.wav, &a.align) else {
            bail!("--rates needs --ckpt, --wav and --align");
        };
        let pre = load_pretrained(ck)?;
        let utt = Utterance::load_files(wav, align, &pre.stft)?;
        let lex = load_lexicon(a.lexicon.as_deref(), wav)?;
        for &r in &a.rates {
            let req = request(&utt, a.span.as_deref(), a.phone_span.as_deref(), a.text.as_deref(), a.target_frames, a.no_project, Some(r))?;
            let plan = plan_edit(&utt, lex.as_ref(), &req)?;
            let out = run_edit(&pre, &utt, &plan, &edit_options(&pre, &a.ttt, a.seed))?;
            println!("rate {r}: {} frames realized", out.report.realized_frames);
            boxes.push(Some(out.report.output_frames));
            mels.push(out.mel);
        }
    }
    let panels: Vec<Panel<'_>> = mels
        .iter()
        .zip(&boxes)
        .map(|(mel, &edit_frames)| Panel { mel, edit_frames })
        .collect();
    plot_panels(&panels, &a.png, &cfg)?;
    println!("wrote {}", a.png.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Synth(a) => synth(a),
        Cmd::Train(a) => train(a),
        Cmd::Edit(a) => edit(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Plot(a) => plot(a),
    }
}

//! Objective metrics, the middle-third reconstruction protocol and
//! spectrogram plots.

use std::f64::consts::{LN_10, PI, SQRT_2};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Utterance;
use crate::error::{Error, Result};
use crate::features::MelSpectrogram;
use crate::pipeline::{plan_edit, run_edit, EditOptions, EditOutput, EditPlan, EditRequest, EditSpan};
use crate::training::Pretrained;
use crate::ttt::TttConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McdConfig {
    /// Cepstra kept after dropping `c0`.
    pub n_cepstra: usize,
    pub use_dtw: bool,
}

impl Default for McdConfig {
    fn default() -> Self {
        Self {
            n_cepstra: 13,
            use_dtw: false,
        }
    }
}

impl McdConfig {
    pub fn describe(&self) -> String {
        format!(
            "mcd: orthonormal DCT-II of natural-log mels, c1..c{} (c0 dropped), (10/ln10)*sqrt(2)*mean frame L2, dtw={}",
            self.n_cepstra,
            if self.use_dtw { "on" } else { "off" }
        )
    }
}

/// `c1..=cn` of one log-mel frame.
pub fn mel_cepstrum(frame: &[f32], n: usize) -> Vec<f64> {
    let len = frame.len() as f64;
    (1..=n)
        .map(|k| {
            let s: f64 = frame
                .iter()
                .enumerate()
                .map(|(i, &x)| x as f64 * (PI * k as f64 * (i as f64 + 0.5) / len).cos())
                .sum();
            s * (2.0 / len).sqrt()
        })
        .collect()
}

fn cepstra(mel: &MelSpectrogram, n: usize) -> Vec<Vec<f64>> {
    (0..mel.frames()).map(|t| mel_cepstrum(&mel.frame(t), n)).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

const MCD_SCALE: f64 = 10.0 / LN_10 * SQRT_2;

/// Mel-cepstral distortion in dB.
pub fn mcd(a: &MelSpectrogram, b: &MelSpectrogram, cfg: &McdConfig) -> Result<f64> {
    if cfg.n_cepstra == 0 {
        return Err(Error::Config("n_cepstra must be at least 1".into()));
    }
    if a.n_mels() != b.n_mels() {
        return Err(Error::Shape(format!("{} vs {} mel bands", a.n_mels(), b.n_mels())));
    }
    if cfg.n_cepstra >= a.n_mels() {
        return Err(Error::Config(format!("{} cepstra need more than {} bands", cfg.n_cepstra, a.n_mels())));
    }
    if a.frames() == 0 || b.frames() == 0 {
        return Err(Error::Shape("mcd of an empty spectrogram".into()));
    }
    let (ca, cb) = (cepstra(a, cfg.n_cepstra), cepstra(b, cfg.n_cepstra));
    let mean = if cfg.use_dtw {
        dtw_mean(&ca, &cb)
    } else {
        if a.frames() != b.frames() {
            return Err(Error::Shape(format!("{} vs {} frames without DTW", a.frames(), b.frames())));
        }
        ca.iter().zip(&cb).map(|(x, y)| dist(x, y)).sum::<f64>() / ca.len() as f64
    };
    Ok(MCD_SCALE * mean)
}

/// Mean frame distance along the cheapest monotone alignment path.
fn dtw_mean(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (n, m) = (a.len(), b.len());
    let mut cost = vec![(f64::INFINITY, 0usize); (n + 1) * (m + 1)];
    cost[0] = (0.0, 0);
    for i in 1..=n {
        for j in 1..=m {
            let d = dist(&a[i - 1], &b[j - 1]);
            let prev = [cost[(i - 1) * (m + 1) + j - 1], cost[(i - 1) * (m + 1) + j], cost[i * (m + 1) + j - 1]]
                .into_iter()
                .fold((f64::INFINITY, 0), |best, c| if c.0 < best.0 { c } else { best });
            cost[i * (m + 1) + j] = (prev.0 + d, prev.1 + 1);
        }
    }
    let (total, len) = cost[n * (m + 1) + m];
    total / len as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DurationMetrics {
    /// Mean absolute per-phoneme error in frames.
    pub mae: f64,
    /// `|sum(pred) - sum(ref)| / sum(ref)` in percent.
    pub length_error_pct: f64,
}

pub fn duration_metrics(pred: &[f64], reference: &[f64]) -> Result<DurationMetrics> {
    if pred.len() != reference.len() {
        return Err(Error::Shape(format!("{} predicted vs {} reference durations", pred.len(), reference.len())));
    }
    if pred.is_empty() {
        return Err(Error::Shape("no durations to compare".into()));
    }
    let mae = pred.iter().zip(reference).map(|(p, r)| (p - r).abs()).sum::<f64>() / pred.len() as f64;
    let total: f64 = reference.iter().sum();
    if total <= 0.0 {
        return Err(Error::Invalid("reference durations sum to zero".into()));
    }
    let length_error_pct = 100.0 * (pred.iter().sum::<f64>() - total).abs() / total;
    Ok(DurationMetrics { mae, length_error_pct })
}

/// Phoneme span `[start, end)` covering the centered `floor(T/3)` frames,
/// widened to whole phonemes.
pub fn middle_third_span(durations: &[u32]) -> Result<(usize, usize)> {
    let total: usize = durations.iter().map(|&d| d as usize).sum();
    if total == 0 {
        return Err(Error::Invalid("utterance has no frames".into()));
    }
    let width = (total / 3).max(1);
    let a = (total - width) / 2;
    let b = a + width;
    let mut start = None;
    let mut end = 0;
    let mut pos = 0;
    for (i, &d) in durations.iter().enumerate() {
        let (s, e) = (pos, pos + d as usize);
        pos = e;
        if d > 0 && s < b && e > a {
            start.get_or_insert(i);
            end = i + 1;
        }
    }
    let start = start.expect("some phoneme covers a frame");
    if start == 0 && end == durations.len() {
        return Err(Error::Invalid("middle third covers every phoneme".into()));
    }
    Ok((start, end))
}

/// One TTT setting of the protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TttSetting {
    pub dp: bool,
    pub sd: bool,
}

impl TttSetting {
    pub const ALL_OFF: Self = Self { dp: false, sd: false };
    pub const ALL_ON: Self = Self { dp: true, sd: true };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolRow {
    pub utt_id: String,
    pub mcd_full_db: f64,
    pub mcd_edit_db: f64,
    pub dur_mae: f64,
    pub dur_len_err_pct: f64,
    pub ttt_dp: bool,
    pub ttt_sd: bool,
    pub seed: u64,
}

/// Middle-third reconstruction request for one utterance.
pub fn middle_third_request(utt: &Utterance) -> Result<EditRequest> {
    let (s, e) = middle_third_span(&utt.durations.0)?;
    let frames: u32 = utt.durations.0[s..e].iter().sum();
    Ok(EditRequest {
        target_frames: Some(frames as usize),
        project: Some(true),
        ..EditRequest::new(&utt.id, EditSpan::Phonemes(s, e))
    })
}

/// Runs the middle-third edit for one utterance and scores it.
pub fn evaluate_utterance(
    pretrained: &Pretrained,
    utt: &Utterance,
    ttt: &TttConfig,
    setting: TttSetting,
    seed: u64,
    mcd_cfg: &McdConfig,
) -> Result<(ProtocolRow, EditPlan, EditOutput)> {
    let plan = plan_edit(utt, None, &middle_third_request(utt)?)?;
    let opts = EditOptions {
        ttt: ttt.clone(),
        skip_dp: !setting.dp,
        skip_sd: !setting.sd,
        seed,
    };
    let out = run_edit(pretrained, utt, &plan, &opts)?;
    let (o0, o1) = plan.original_frames;
    let (e0, e1) = out.report.output_frames;
    let full = mcd(&out.mel, &utt.mel, mcd_cfg)?;
    let edit = mcd(&out.mel.slice_frames(e0, e1)?, &utt.mel.slice_frames(o0, o1)?, mcd_cfg)?;
    let reference: Vec<f64> = utt.durations.0[plan.span.0..plan.span.1].iter().map(|&d| d as f64).collect();
    let pred: Vec<f64> = out.report.edit_durations.iter().map(|&d| d as f64).collect();
    let dm = duration_metrics(&pred, &reference)?;
    Ok((
        ProtocolRow {
            utt_id: utt.id.clone(),
            mcd_full_db: full,
            mcd_edit_db: edit,
            dur_mae: dm.mae,
            dur_len_err_pct: dm.length_error_pct,
            ttt_dp: setting.dp,
            ttt_sd: setting.sd,
            seed,
        },
        plan,
        out,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub utt_id: String,
    pub setting: TttSetting,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingSummary {
    pub setting: TttSetting,
    pub evaluated: usize,
    pub mcd_full_db: Option<MeanStd>,
    pub mcd_edit_db: Option<MeanStd>,
    pub dur_mae: Option<MeanStd>,
    pub dur_len_err_pct: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub mcd: McdConfig,
    pub rows: Vec<ProtocolRow>,
    pub failures: Vec<Failure>,
    pub summary: Vec<SettingSummary>,
}

/// Middle-third protocol over the first `n_utts` utterances in id order, once
/// per setting.
pub fn run_protocol(
    pretrained: &Pretrained,
    utts: &[&Utterance],
    ttt: &TttConfig,
    settings: &[TttSetting],
    n_utts: usize,
    seed: u64,
    mcd_cfg: &McdConfig,
) -> Result<ProtocolReport> {
    run_protocol_with(pretrained, utts, ttt, settings, n_utts, seed, mcd_cfg, |_, _, _, _| {})
}

/// [`run_protocol`], handing every successful edit to `inspect`.
#[allow(clippy::too_many_arguments)]
pub fn run_protocol_with(
    pretrained: &Pretrained,
    utts: &[&Utterance],
    ttt: &TttConfig,
    settings: &[TttSetting],
    n_utts: usize,
    seed: u64,
    mcd_cfg: &McdConfig,
    mut inspect: impl FnMut(&Utterance, &ProtocolRow, &EditPlan, &EditOutput),
) -> Result<ProtocolReport> {
    if settings.is_empty() {
        return Err(Error::Invalid("no TTT settings to evaluate".into()));
    }
    let mut ordered: Vec<&Utterance> = utts.to_vec();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));
    ordered.truncate(n_utts);
    if ordered.is_empty() {
        return Err(Error::Invalid("no utterances to evaluate".into()));
    }
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut summary = Vec::new();
    for &setting in settings {
        let mut done = Vec::new();
        for utt in &ordered {
            match evaluate_utterance(pretrained, utt, ttt, setting, seed, mcd_cfg) {
                Ok((row, plan, out)) => {
                    inspect(utt, &row, &plan, &out);
                    done.push(row);
                }
                Err(e) => failures.push(Failure {
                    utt_id: utt.id.clone(),
                    setting,
                    error: e.to_string(),
                }),
            }
        }
        let col = |f: fn(&ProtocolRow) -> f64| MeanStd::of(&done.iter().map(f).collect::<Vec<_>>());
        summary.push(SettingSummary {
            setting,
            evaluated: done.len(),
            mcd_full_db: col(|r| r.mcd_full_db),
            mcd_edit_db: col(|r| r.mcd_edit_db),
            dur_mae: col(|r| r.dur_mae),
            dur_len_err_pct: col(|r| r.dur_len_err_pct),
        });
        rows.extend(done);
    }
    Ok(ProtocolReport {
        mcd: *mcd_cfg,
        rows,
        failures,
        summary,
    })
}

pub const CSV_COLUMNS: [&str; 10] = [
    "utt_id",
    "mcd_full_db",
    "mcd_edit_db",
    "dur_mae",
    "dur_len_err_pct",
    "wer",
    "sim",
    "ttt_dp",
    "ttt_sd",
    "seed",
];

/// CSV with a leading `#` line naming the MCD variant. WER and SIM are
/// `n/a`.
pub fn write_protocol_csv<W: Write>(report: &ProtocolReport, mut out: W) -> Result<()> {
    let io = |e: std::io::Error| Error::Invalid(format!("writing csv: {e}"));
    writeln!(out, "# {}", report.mcd.describe()).map_err(io)?;
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Invalid(format!("writing csv: {e}"));
    w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    for r in &report.rows {
        w.write_record([
            r.utt_id.clone(),
            format!("{:.6}", r.mcd_full_db),
            format!("{:.6}", r.mcd_edit_db),
            format!("{:.6}", r.dur_mae),
            format!("{:.6}", r.dur_len_err_pct),
            "n/a".into(),
            "n/a".into(),
            r.ttt_dp.to_string(),
            r.ttt_sd.to_string(),
            r.seed.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(io)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlotConfig {
    /// Horizontal pixels per mel frame.
    pub px_per_frame: usize,
    /// Vertical pixels per mel band.
    pub px_per_band: usize,
}

impl Default for PlotConfig {
    fn default() -> Self {
        Self {
            px_per_frame: 2,
            px_per_band: 2,
        }
    }
}

/// One spectrogram with an optional edited frame range.
pub struct Panel<'a> {
    pub mel: &'a MelSpectrogram,
    pub edit_frames: Option<(usize, usize)>,
}

const RED: [u8; 3] = [230, 20, 20];
const GAP: usize = 6;

/// Dark blue through orange to pale yellow.
fn colormap(v: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 5] = [
        [0.0, 0.0, 16.0],
        [59.0, 15.0, 112.0],
        [183.0, 55.0, 121.0],
        [252.0, 137.0, 97.0],
        [252.0, 253.0, 191.0],
    ];
    let x = v.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    let mut out = [0u8; 3];
    for (c, o) in out.iter_mut().enumerate() {
        *o = (STOPS[i][c] * (1.0 - f) + STOPS[i + 1][c] * f).round() as u8;
    }
    out
}

/// Pixel rectangle `(x0, x1)` of an edit range in a panel, exclusive end.
pub fn box_columns(edit_frames: (usize, usize), cfg: &PlotConfig) -> (usize, usize) {
    (edit_frames.0 * cfg.px_per_frame, edit_frames.1 * cfg.px_per_frame)
}

/// RGB pixels and size of stacked panels sharing one color scale, low
/// frequencies at the bottom of each panel.
pub fn render_panels(panels: &[Panel<'_>], cfg: &PlotConfig) -> Result<(Vec<u8>, usize, usize)> {
    if panels.is_empty() || cfg.px_per_frame == 0 || cfg.px_per_band == 0 {
        return Err(Error::Invalid("nothing to plot".into()));
    }
    let width = panels.iter().map(|p| p.mel.frames()).max().unwrap_or(0) * cfg.px_per_frame;
    let heights: Vec<usize> = panels.iter().map(|p| p.mel.n_mels() * cfg.px_per_band).collect();
    let height = heights.iter().sum::<usize>() + GAP * (panels.len() - 1);
    if width == 0 {
        return Err(Error::Invalid("empty spectrogram".into()));
    }
    let lo = panels.iter().map(|p| p.mel.min_value()).fold(f32::INFINITY, f32::min) as f64;
    let hi = panels.iter().map(|p| p.mel.max_value()).fold(f32::NEG_INFINITY, f32::max) as f64;
    let range = if hi > lo { hi - lo } else { 1.0 };
    let mut px = vec![255u8; width * height * 3];
    let mut put = |x: usize, y: usize, c: [u8; 3]| px[(y * width + x) * 3..][..3].copy_from_slice(&c);
    let mut top = 0;
    for (p, &h) in panels.iter().zip(&heights) {
        let mel = p.mel;
        for y in 0..h {
            let band = mel.n_mels() - 1 - y / cfg.px_per_band;
            for x in 0..mel.frames() * cfg.px_per_frame {
                let v = mel.get(band, x / cfg.px_per_frame) as f64;
                put(x, top + y, colormap((v - lo) / range));
            }
        }
        if let Some((a, b)) = p.edit_frames {
            if a > b || b > mel.frames() {
                return Err(Error::Shape(format!("edit frames [{a}, {b}) outside {} frames", mel.frames())));
            }
            let (x0, x1) = box_columns((a, b), cfg);
            if x1 > x0 {
                for y in top..top + h {
                    put(x0, y, RED);
                    put(x1 - 1, y, RED);
                }
                for x in x0..x1 {
                    put(x, top, RED);
                    put(x, top + h - 1, RED);
                }
            }
        }
        top += h + GAP;
    }
    Ok((px, width, height))
}

pub fn write_png(path: &Path, rgb: &[u8], width: usize, height: usize) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Invalid(format!("{}: {e}", path.display()));
    let mut w = enc.write_header().map_err(png_err)?;
    w.write_image_data(rgb).map_err(png_err)?;
    w.finish().map_err(png_err)
}

/// Log-mel heatmap with an optional red box around `edit_frames`.
pub fn plot_spectrogram(mel: &MelSpectrogram, edit_frames: Option<(usize, usize)>, path: &Path, cfg: &PlotConfig) -> Result<()> {
    plot_panels(&[Panel { mel, edit_frames }], path, cfg)
}

/// Panels stacked top to bottom.
pub fn plot_panels(panels: &[Panel<'_>], path: &Path, cfg: &PlotConfig) -> Result<()> {
    let (px, w, h) = render_panels(panels, cfg)?;
    write_png(path, &px, w, h)
}

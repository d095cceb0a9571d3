//! The operations behind the command-line tool: data generation, training,
//! evaluation, gradient checking and the image-wise vs region-wise
//! benchmark.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::data::{
    generate_indexed, manifest_path, DatasetManifest, Gray, Sample, SampleParams, Split,
};
use crate::error::{Error, Result};
use crate::gradcheck::{gradcheck_all, GradcheckEntry};
use crate::loss::LossReport;
use crate::metrics::{aggregate_report, confusion_counts, Report, SliceResult};
use crate::model::{predict, train_step, Params, TrainState};
use crate::roiconv::{rasterize_rois, roi_conv_forward, roi_conv_regionwise, same_padding, BBox};
use crate::tensor::{conv2d_forward, ConvParams, Tensor};

/// 0 success, 1 usage or input error, 2 numerical failure.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite { .. } | Error::Numerical(_) => 2,
        _ => 1,
    }
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write(p: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(p, contents).map_err(|e| Error::io(p, e))
}

/// Writes `train/` and `test/` PGM pairs and one manifest per split.
pub fn cmd_gen_data(
    out_dir: &Path,
    n_train: usize,
    n_test: usize,
    size: (usize, usize),
    seed: u64,
) -> Result<()> {
    cmd_gen_data_with(
        out_dir,
        n_train,
        n_test,
        size,
        seed,
        &SampleParams::default(),
    )
}

pub fn cmd_gen_data_with(
    out_dir: &Path,
    n_train: usize,
    n_test: usize,
    (height, width): (usize, usize),
    seed: u64,
    params: &SampleParams,
) -> Result<()> {
    for (split, n) in [(Split::Train, n_train), (Split::Test, n_test)] {
        let dir = out_dir.join(split.dir_name());
        mkdir(&dir)?;
        let split_seed = split.seed(seed);
        let samples: Vec<Sample> = (0..n as u64)
            .into_par_iter()
            .map(|i| generate_indexed(split_seed, i, height, width, params))
            .collect::<Result<_>>()?;
        let mut entries = Vec::with_capacity(n);
        for (i, s) in samples.iter().enumerate() {
            let img = format!("{}/{i:06}.pgm", split.dir_name());
            let mask = format!("{}/{i:06}_mask.pgm", split.dir_name());
            crate::data::write_pgm(&out_dir.join(&img), &Gray::from_image(&s.image)?)?;
            crate::data::write_pgm(&out_dir.join(&mask), &Gray::from_mask(&s.gt_mask))?;
            entries.push((img, mask));
        }
        DatasetManifest::write(&manifest_path(out_dir, split), &entries)?;
    }
    let info = format!(
        "height = {height}\nwidth = {width}\nseed = {seed}\ntrain = {n_train}\ntest = {n_test}\n"
    );
    write(&out_dir.join("dataset.info"), info)
}

/// Where a run writes its side files, next to the checkpoint.
pub fn config_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("config")
}

pub fn loss_log_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("loss.csv")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn loss_log_line(iter: u64, r: &LossReport, lr: f64) -> String {
    format!(
        "{iter},{},{},{},{},{lr}",
        fmt_opt(r.l_reg),
        fmt_opt(r.l_cls),
        r.l_seg,
        r.total
    )
}

/// Sample index used at `iteration`: a seeded permutation per epoch.
pub struct EpochSampler {
    seed: u64,
    n: usize,
    epoch: Option<u64>,
    order: Vec<usize>,
}

impl EpochSampler {
    pub fn new(seed: u64, n: usize) -> Self {
        EpochSampler {
            seed,
            n,
            epoch: None,
            order: Vec::new(),
        }
    }

    pub fn index(&mut self, iteration: u64) -> usize {
        let epoch = iteration / self.n as u64;
        if self.epoch != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5348_5546_464c_4521);
            rng.set_stream(epoch);
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut rng);
            self.epoch = Some(epoch);
        }
        self.order[(iteration % self.n as u64) as usize]
    }
}

pub struct TrainOutcome {
    pub state: TrainState<f32>,
    pub log: Vec<LossReport>,
}

/// Trains on in-memory samples for `cfg.network.iterations` steps.
pub fn train_samples(
    samples: &[Sample],
    cfg: &RunConfig,
    mut on_step: impl FnMut(u64, &LossReport),
) -> Result<TrainOutcome> {
    let net = &cfg.network;
    net.validate()?;
    if net.iterations > 0 && samples.is_empty() {
        return Err(Error::invalid("train", "no training samples"));
    }
    for s in samples {
        if s.image.shape() != [1, net.height, net.width] {
            return Err(Error::ShapeMismatch {
                op: "train",
                expected: vec![1, net.height, net.width],
                got: s.image.shape().to_vec(),
            });
        }
    }
    let anchors = net.anchors();
    let mut state = TrainState::<f32>::new(net);
    let mut sampler = EpochSampler::new(net.seed, samples.len());
    let mut log = Vec::with_capacity(net.iterations as usize);
    while state.iteration < net.iterations {
        let it = state.iteration;
        let sample = &samples[sampler.index(it)];
        let report = train_step(sample, &mut state, net, &anchors)?;
        on_step(it, &report);
        log.push(report);
    }
    Ok(TrainOutcome { state, log })
}

/// Trains from `data_dir/train.manifest`; writes the checkpoint, the
/// resolved config and the loss log.
pub fn cmd_train(data_dir: &Path, cfg: &RunConfig, out_ckpt: &Path) -> Result<TrainOutcome> {
    let manifest = DatasetManifest::read(&manifest_path(data_dir, Split::Train), Split::Train)?;
    let samples = manifest.load_all()?;
    if let Some(parent) = out_ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    write(&config_path(out_ckpt), cfg.to_text())?;
    let mut csv = String::from("iter,l_reg,l_cls,l_seg,total,lr\n");
    let sgd = cfg.network.sgd.clone();
    let total = cfg.network.iterations;
    let outcome = train_samples(&samples, cfg, |it, r| {
        writeln!(csv, "{}", loss_log_line(it, r, sgd.lr_at(it))).unwrap();
        if (it + 1) % 250 == 0 || it + 1 == total {
            log::info!(
                "iter {}/{total}: total loss {:.4} (seg {:.4})",
                it + 1,
                r.total,
                r.l_seg
            );
        }
    });
    write(&loss_log_path(out_ckpt), &csv)?;
    let outcome = outcome?;
    save_checkpoint(&outcome.state, out_ckpt)?;
    Ok(outcome)
}

/// Evaluates `params` on samples, in order.
pub fn evaluate_samples(
    samples: &[(String, Sample)],
    params: &Params<f32>,
    cfg: &RunConfig,
) -> Result<Report> {
    let net = &cfg.network;
    let anchors = net.anchors();
    let slices = samples
        .par_iter()
        .map(|(id, s)| {
            let (pred, _) = predict(&s.image, params, net, &anchors)?;
            Ok(SliceResult::new(
                id.clone(),
                confusion_counts(&pred, &s.gt_mask)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate_report(slices)
}

/// Evaluates a checkpoint on `data_dir/test.manifest` and writes the report
/// and the sorted dice curve.
pub fn cmd_eval(
    data_dir: &Path,
    ckpt: &Path,
    report_path: &Path,
    curve_path: &Path,
) -> Result<Report> {
    let cfg = RunConfig::load(&config_path(ckpt))?;
    let state = load_checkpoint::<f32>(ckpt)?;
    state.params.check_against(&cfg.network)?;
    let manifest = DatasetManifest::read(&manifest_path(data_dir, Split::Test), Split::Test)?;
    let samples = (0..manifest.entries.len())
        .map(|i| {
            let id = manifest.entries[i]
                .0
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| i.to_string());
            manifest.load(i).map(|s| (id, s))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate_samples(&samples, &state.params, &cfg)?;
    write(report_path, report.to_csv())?;
    write(curve_path, report.curve_csv())?;
    Ok(report)
}

pub fn cmd_gradcheck(seed: u64) -> Result<Vec<GradcheckEntry>> {
    gradcheck_all(seed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub h: usize,
    pub w: usize,
    pub n_rois: usize,
    pub coverage: f64,
    pub t_imagewise_us: f64,
    pub t_regionwise_us: f64,
}

pub const BENCH_CHANNELS: usize = 16;
/// Agreement tolerance of the two `f32` paths against the dense oracle.
pub const BENCH_TOLERANCE: f32 = 1e-5;

fn random_rois<R: Rng>(rng: &mut R, n: usize, h: usize, w: usize) -> Vec<BBox> {
    (0..n)
        .map(|_| {
            let bw = rng.gen_range(1..=(w / 2).max(1));
            let bh = rng.gen_range(1..=(h / 2).max(1));
            let x0 = rng.gen_range(0..=w - bw) as i32;
            let y0 = rng.gen_range(0..=h - bh) as i32;
            BBox::new(x0, y0, x0 + bw as i32 - 1, y0 + bh as i32 - 1)
        })
        .collect()
}

/// Checks both ROI-convolution paths against dense-conv-then-mask. Inside
/// the union all three must agree; outside, both paths must be exactly zero.
pub fn check_roi_paths(x: &Tensor<f32>, p: &ConvParams<f32>, rois: &[BBox]) -> Result<()> {
    let (_, h, w) = x.chw()?;
    let mask = rasterize_rois(rois, h, w)?;
    let image = roi_conv_forward(x, p, &mask)?;
    let region = roi_conv_regionwise(x, p, rois)?;
    let dense = conv2d_forward(x, p)?;
    let plane = h * w;
    for (idx, ((&a, &b), &d)) in image
        .data()
        .iter()
        .zip(region.data())
        .zip(dense.data())
        .enumerate()
    {
        let inside = mask.cells()[idx % plane];
        let ok = if inside {
            (a - d).abs() <= BENCH_TOLERANCE * d.abs().max(1.0)
                && (b - d).abs() <= BENCH_TOLERANCE * d.abs().max(1.0)
        } else {
            a == 0.0 && b == 0.0
        };
        if !ok {
            return Err(Error::Numerical(format!(
                "roi paths disagree at element {idx}: image-wise {a}, region-wise {b}, dense {d}"
            )));
        }
    }
    Ok(())
}

/// Times image-wise against region-wise ROI convolution over a grid of
/// square feature sizes and ROI counts. Agreement is checked before timing.
pub fn cmd_bench(
    sizes: &[usize],
    roi_counts: &[usize],
    reps: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = 3;
    let p = ConvParams::new(
        Tensor::uniform(&[BENCH_CHANNELS, BENCH_CHANNELS, k, k], 0.3, &mut rng),
        Tensor::uniform(&[BENCH_CHANNELS], 0.1, &mut rng),
        1,
        same_padding(k),
    )?;
    let reps = reps.max(1);
    let mut rows = Vec::new();
    for &s in sizes {
        let x = Tensor::<f32>::uniform(&[BENCH_CHANNELS, s, s], 1.0, &mut rng);
        for &n in roi_counts {
            let rois = random_rois(&mut rng, n, s, s);
            check_roi_paths(&x, &p, &rois)?;
            let mask = rasterize_rois(&rois, s, s)?;
            let t0 = Instant::now();
            for _ in 0..reps {
                std::hint::black_box(roi_conv_forward(&x, &p, &mask)?);
            }
            let t_image = t0.elapsed().as_secs_f64() * 1e6 / reps as f64;
            let t0 = Instant::now();
            for _ in 0..reps {
                std::hint::black_box(roi_conv_regionwise(&x, &p, &rois)?);
            }
            let t_region = t0.elapsed().as_secs_f64() * 1e6 / reps as f64;
            rows.push(BenchRow {
                h: s,
                w: s,
                n_rois: n,
                coverage: mask.count() as f64 / (s * s) as f64,
                t_imagewise_us: t_image,
                t_regionwise_us: t_region,
            });
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("h,w,n_rois,coverage,t_imagewise_us,t_regionwise_us\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{:.4},{:.2},{:.2}",
            r.h, r.w, r.n_rois, r.coverage, r.t_imagewise_us, r.t_regionwise_us
        )
        .unwrap();
    }
    s
}

/// Parses `HxW`.
pub fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::Config(format!("size `{s}` is not HxW")))?;
    let p = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("size `{s}` is not HxW")))
    };
    Ok((p(h)?, p(w)?))
}

pub fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("`{s}` is not a comma-separated list")))
        })
        .collect()
}

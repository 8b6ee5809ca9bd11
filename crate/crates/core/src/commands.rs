//! Library side of the operator commands: data generation, training, registration and evaluation.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bev::{self, BevGrid, PointCloud, RigidTransform};
use crate::config::{derive_seed, RunConfig, SplitConfig};
use crate::dataset::{self, ScanPair};
use crate::evaluation::{self, Confusion, OverlapMetrics, RecallReport, RegistrationMetrics};
use crate::heads;
use crate::model::Model;
use crate::nn::{checkpoint, Adam, ParamStore};
use crate::pipeline::{self, PairData, Registration, StepTerms};
use crate::{Error, Result};

/// One line of a pair manifest: two scan files, `gt` mapping Q into P, and their distance.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub p: PathBuf,
    pub q: PathBuf,
    pub gt: RigidTransform,
    pub distance: f64,
}

/// `p q r00 r01 r02 t0 r10 r11 r12 t1 r20 r21 r22 t2 distance`, one pair per line.
pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        write!(s, "{} {}", e.p.display(), e.q.display()).unwrap();
        for v in e.gt.to_row_major() {
            write!(s, " {v}").unwrap();
        }
        writeln!(s, " {}", e.distance).unwrap();
    }
    s
}

/// Parses manifest text; blank lines and lines starting with `#` are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 15 {
            return Err(Error::Format(format!("manifest line {}: expected 15 fields, got {}", n + 1, f.len())));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Format(format!("manifest line {}: bad number `{s}`", n + 1)))
        };
        let mut v = [0.0; 12];
        for (k, x) in v.iter_mut().enumerate() {
            *x = num(f[2 + k])?;
        }
        out.push(ManifestEntry {
            p: PathBuf::from(f[0]),
            q: PathBuf::from(f[1]),
            gt: RigidTransform::from_row_major(&v)?,
            distance: num(f[14])?,
        });
    }
    Ok(out)
}

/// Loads a manifest, resolving relative scan paths against its directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = parse_manifest(&text)?;
    for e in &mut entries {
        for p in [&mut e.p, &mut e.q] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
    Ok(entries)
}

fn split_by_name<'a>(cfg: &'a RunConfig, name: &str) -> Result<&'a SplitConfig> {
    match name {
        "train" => Ok(&cfg.data.train),
        "test" => Ok(&cfg.data.test),
        other => Err(Error::Config(format!("unknown split `{other}` (expected train, test or loop)"))),
    }
}

/// Generates every pair of a split in memory; names are `<split>_<scene>_<pair>`.
pub fn split_pairs(cfg: &RunConfig, split: &str) -> Result<Vec<(String, ScanPair)>> {
    let sc = split_by_name(cfg, split)?;
    let mut out = Vec::new();
    for s in 0..sc.scenes as u64 {
        let id = sc.first_scene + s;
        let scene_seed = derive_seed(derive_seed(cfg.data.seed, 10), id);
        let scene = dataset::generate_scene(scene_seed, &cfg.scene)?;
        let distances: Vec<f64> = if sc.distances.is_empty() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(scene_seed, 1));
            (0..sc.pairs_per_scene)
                .map(|_| {
                    if sc.max_distance > sc.min_distance {
                        rng.random_range(sc.min_distance..=sc.max_distance)
                    } else {
                        sc.min_distance
                    }
                })
                .collect()
        } else {
            sc.distances.clone()
        };
        for (k, &d) in distances.iter().enumerate() {
            let pair_seed = derive_seed(scene_seed, 100 + k as u64);
            let pair = dataset::make_pair(&scene, &cfg.scene, d, pair_seed, &cfg.pairs, &cfg.sensor)?;
            out.push((format!("{split}_{id:04}_{k:03}"), pair));
        }
    }
    Ok(out)
}

/// The loop-closure corpus of the configuration.
pub fn loop_corpus(cfg: &RunConfig) -> Result<dataset::LoopCorpus> {
    let scene = dataset::generate_scene(derive_seed(cfg.data.seed, 20), &cfg.data.loop_scene)?;
    Ok(dataset::loop_corpus(&scene, &cfg.data.loop_corpus, derive_seed(cfg.data.seed, 21), &cfg.sensor))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes a split's scans and `<split>.manifest` under `out`, or for `loop` a KITTI-layout
/// sequence directory `loop/` with `poses.txt`. Returns the manifest or sequence path.
pub fn cmd_gen(cfg: &RunConfig, split: &str, out: &Path) -> Result<PathBuf> {
    if split == "loop" {
        let dir = out.join("loop");
        create_dir(&dir)?;
        let corpus = loop_corpus(cfg)?;
        for (k, f) in corpus.frames.iter().enumerate() {
            bev::save_kitti_bin(dir.join(format!("{k:06}.bin")), f)?;
        }
        bev::save_poses(dir.join("poses.txt"), &corpus.poses)?;
        return Ok(dir);
    }
    let scans = out.join("scans");
    create_dir(&scans)?;
    let mut entries = Vec::new();
    for (name, pair) in split_pairs(cfg, split)? {
        let p = PathBuf::from("scans").join(format!("{name}_p.bin"));
        let q = PathBuf::from("scans").join(format!("{name}_q.bin"));
        bev::save_kitti_bin(out.join(&p), &pair.p)?;
        bev::save_kitti_bin(out.join(&q), &pair.q)?;
        entries.push(ManifestEntry {
            p,
            q,
            gt: pair.gt,
            distance: pair.distance,
        });
    }
    let path = out.join(format!("{split}.manifest"));
    write_file(&path, format_manifest(&entries))?;
    Ok(path)
}

/// Digest tying checkpoints to the network shape of a configuration.
pub fn model_digest(cfg: &RunConfig) -> [u8; 32] {
    checkpoint::config_digest(&cfg.model_identity())
}

/// Builds the network of `cfg`, restoring parameters from `checkpoint` when given.
pub fn load_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(Model, ParamStore, u64)> {
    let (model, mut store) = Model::new(cfg.model.clone(), cfg.bev)?;
    let step = match checkpoint {
        Some(path) => checkpoint::load(path, &mut store, &model_digest(cfg))?,
        None => 0,
    };
    Ok((model, store, step))
}

/// Supervision for every manifest pair.
pub fn load_pair_data(model: &Model, entries: &[ManifestEntry]) -> Result<Vec<PairData>> {
    entries
        .iter()
        .map(|e| {
            let p = bev::load_kitti_bin(&e.p)?;
            let q = bev::load_kitti_bin(&e.q)?;
            PairData::new(model, &p, &q, e.gt, e.distance)
        })
        .collect()
}

/// Header of training logs.
pub const LOG_HEADER: &str = "step,desc,det,reg,bce,sg,total";

/// Output locations of a training run.
#[derive(Debug, Clone)]
pub struct TrainPaths {
    pub log: PathBuf,
    pub checkpoint: PathBuf,
    /// Checkpoint to continue from; log lines are appended after its step.
    pub resume: Option<PathBuf>,
}

/// First and last logged steps of a training run.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub start: u64,
    pub end: u64,
    pub first: Option<StepTerms>,
    pub last: Option<StepTerms>,
}

/// Trains on in-memory pairs; checkpoints every `checkpoint_every` steps and at the end.
pub fn train_pairs(cfg: &RunConfig, pairs: &[PairData], paths: &TrainPaths) -> Result<TrainSummary> {
    let (model, mut store, start) = load_model(cfg, paths.resume.as_deref())?;
    let mut adam = Adam::new(cfg.train.lr);
    adam.step = start;
    let digest = model_digest(cfg);
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(paths.resume.is_some())
        .write(true)
        .truncate(paths.resume.is_none())
        .open(&paths.log)
        .map_err(|e| Error::io(&paths.log, e))?;
    let log_err = |e| Error::io(&paths.log, e);
    if paths.resume.is_none() {
        writeln!(log, "{LOG_HEADER}").map_err(log_err)?;
    }
    let clock = std::time::Instant::now();
    let mut summary = TrainSummary {
        start,
        end: start,
        first: None,
        last: None,
    };
    let every = cfg.train.checkpoint_every;
    pipeline::train_range(&model, &mut store, &mut adam, pairs, &cfg.train, start, cfg.train.steps, |step, terms, store, _| {
        writeln!(log, "{}", terms.log_line(step)).map_err(log_err)?;
        summary.first.get_or_insert(*terms);
        summary.last = Some(*terms);
        summary.end = step + 1;
        if (step + 1) % every == 0 {
            checkpoint::save(&paths.checkpoint, store, &digest, step + 1)?;
        }
        Ok(())
    })?;
    checkpoint::save(&paths.checkpoint, &store, &digest, summary.end)?;
    let mut time_path = paths.log.clone().into_os_string();
    time_path.push(".time");
    let secs = clock.elapsed().as_secs_f64();
    write_file(Path::new(&time_path), format!("steps={}\nwall_seconds={secs:.3}\n", summary.end - start))?;
    Ok(summary)
}

/// `cmd_train`: loads a manifest and trains on all of its pairs.
pub fn cmd_train(cfg: &RunConfig, manifest: &Path, paths: &TrainPaths) -> Result<TrainSummary> {
    let entries = load_manifest(manifest)?;
    if entries.is_empty() {
        return Err(Error::EmptyInput("manifest has no pairs"));
    }
    let (model, _, _) = load_model(cfg, None)?;
    let pairs = load_pair_data(&model, &entries)?;
    train_pairs(cfg, &pairs, paths)
}

/// Human-readable report of one registration, with errors against `gt` when given.
pub fn registration_report(r: &Registration, gt: Option<&RigidTransform>) -> String {
    let mut s = String::new();
    let t: Vec<String> = r.result.transform.to_row_major().iter().map(|v| format!("{v:.9}")).collect();
    writeln!(s, "transform {}", t.join(" ")).unwrap();
    writeln!(s, "success {}", r.result.success).unwrap();
    writeln!(
        s,
        "inliers {} of {} correspondences (ratio {:.6})",
        r.result.inliers.len(),
        r.result.correspondences,
        r.result.inlier_ratio
    )
    .unwrap();
    writeln!(s, "iterations {}", r.result.iterations).unwrap();
    writeln!(s, "keypoints {} {}", r.keypoints_p.len(), r.keypoints_q.len()).unwrap();
    writeln!(s, "tau {:.6}", r.tau).unwrap();
    if let Some(gt) = gt {
        let (rte, rre) = evaluation::pose_errors(&r.result.transform, gt);
        writeln!(s, "rte_m {rte:.6}").unwrap();
        writeln!(s, "rre_deg {rre:.6}").unwrap();
    }
    s
}

/// `cmd_register`: the full inference pipeline on two scan files.
pub fn cmd_register(cfg: &RunConfig, checkpoint: &Path, p: &Path, q: &Path, filter: bool) -> Result<Registration> {
    let (model, store, _) = load_model(cfg, Some(checkpoint))?;
    let (cp, cq) = (bev::load_kitti_bin(p)?, bev::load_kitti_bin(q)?);
    pipeline::register_clouds(&model, &store, &cp, &cq, &cfg.register, filter)
}

/// Evaluation protocol selected on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Overlap,
    Registration,
    LoopClosure,
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "overlap" => Ok(Self::Overlap),
            "registration" => Ok(Self::Registration),
            "loopclosure" => Ok(Self::LoopClosure),
            other => Err(Error::Config(format!("unknown protocol `{other}`"))),
        }
    }
}

/// Index of the bucket holding `d`: the first closed, the rest `(lo, hi]`.
pub fn bucket_of(edges: &[f64], d: f64) -> Option<usize> {
    if d < edges[0] {
        return None;
    }
    (0..edges.len() - 1).find(|&k| d <= edges[k + 1] && (k == 0 || d > edges[k]))
}

fn bucket_label(edges: &[f64], k: usize) -> String {
    format!("{}-{}", edges[k], edges[k + 1])
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"))
}

/// Overlap metrics of one pair, pooled over both clouds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapPairResult {
    pub distance: f64,
    pub confusion: Confusion,
    pub metrics: OverlapMetrics,
}

/// Cached features of both clouds of a pair.
pub fn pair_features(model: &Model, store: &ParamStore, data: &PairData) -> Result<(crate::model::CloudFeatures, crate::model::CloudFeatures)> {
    Ok((model.features(store, &data.grid_p)?, model.features(store, &data.grid_q)?))
}

/// Thresholded overlap maps against their labels; `oracle` substitutes the labels for the prediction.
pub fn eval_overlap(model: &Model, store: &ParamStore, pairs: &[PairData], threshold: f64, oracle: bool) -> Result<Vec<OverlapPairResult>> {
    pairs
        .iter()
        .map(|d| {
            let (gp, gq) = if oracle {
                (d.labels.p.clone(), d.labels.q.clone())
            } else {
                let (fp, fq) = pair_features(model, store, d)?;
                model.overlap_scores(store, &fp, &fq)?
            };
            let mut c = evaluation::confusion(&gp, &d.labels.p, threshold)?;
            c.add(&evaluation::confusion(&gq, &d.labels.q, threshold)?);
            Ok(OverlapPairResult {
                distance: d.distance,
                confusion: c,
                metrics: c.metrics(),
            })
        })
        .collect()
}

/// Registration outcome of one pair with and without the overlap filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegistrationPairResult {
    pub distance: f64,
    pub filtered: RegistrationMetrics,
    pub unfiltered: RegistrationMetrics,
    pub tau: f64,
}

/// Registers every pair in both keypoint modes; `oracle` substitutes the ground truth.
pub fn eval_registration(model: &Model, store: &ParamStore, pairs: &[PairData], cfg: &RunConfig, oracle: bool) -> Result<Vec<RegistrationPairResult>> {
    pairs
        .iter()
        .enumerate()
        .map(|(k, d)| {
            if oracle {
                let m = RegistrationMetrics::new(&d.gt, &d.gt, true);
                return Ok(RegistrationPairResult {
                    distance: d.distance,
                    filtered: m,
                    unfiltered: m,
                    tau: 1.0,
                });
            }
            let (fp, fq) = pair_features(model, store, d)?;
            let mut reg = cfg.register;
            reg.ransac.seed = derive_seed(cfg.register.ransac.seed, k as u64);
            let with = pipeline::register_features(model, store, &fp, &fq, &reg, true)?;
            let without = pipeline::register_features(model, store, &fp, &fq, &reg, false)?;
            Ok(RegistrationPairResult {
                distance: d.distance,
                filtered: RegistrationMetrics::new(&with.result.transform, &d.gt, with.result.success),
                unfiltered: RegistrationMetrics::new(&without.result.transform, &d.gt, without.result.success),
                tau: with.tau,
            })
        })
        .collect()
}

/// Recall@1 over a sequence, scoring candidates by τ; `oracle` scores by negated planar distance.
pub fn eval_loop(model: &Model, store: &ParamStore, frames: &[PointCloud], poses: &[RigidTransform], cfg: &RunConfig, oracle: bool) -> Result<RecallReport> {
    if frames.len() != poses.len() {
        return Err(Error::Format(format!("{} frames but {} poses", frames.len(), poses.len())));
    }
    let feats = if oracle {
        vec![]
    } else {
        frames
            .iter()
            .map(|f| model.features(store, &BevGrid::voxelize(f, &model.bev)))
            .collect::<Result<Vec<_>>>()?
    };
    evaluation::recall_at_1(poses, &cfg.eval.loop_protocol, |q, j| {
        if oracle {
            let d = poses[q].translation() - poses[j].translation();
            return Ok(-d.x.hypot(d.y));
        }
        let (gq, gj) = model.overlap_scores(store, &feats[q], &feats[j])?;
        heads::similarity(&gq, &gj)
    })
}

/// Per-bucket overlap table, per-pair rows and a key/value summary.
pub fn overlap_tables(edges: &[f64], results: &[OverlapPairResult]) -> (String, String, String) {
    let mut table = String::from("bucket,pairs,iou,precision,recall\n");
    let mut summary = String::new();
    let mut row = |label: &str, rs: &[&OverlapPairResult]| {
        let ms: Vec<OverlapMetrics> = rs.iter().map(|r| r.metrics).collect();
        let m = evaluation::mean_overlap(&ms);
        writeln!(table, "{label},{},{},{},{}", rs.len(), fmt_opt(m.iou), fmt_opt(m.precision), fmt_opt(m.recall)).unwrap();
        writeln!(summary, "overlap.{label}.pairs={}", rs.len()).unwrap();
        writeln!(summary, "overlap.{label}.iou={}", fmt_opt(m.iou)).unwrap();
        writeln!(summary, "overlap.{label}.precision={}", fmt_opt(m.precision)).unwrap();
        writeln!(summary, "overlap.{label}.recall={}", fmt_opt(m.recall)).unwrap();
    };
    for k in 0..edges.len() - 1 {
        let rs: Vec<_> = results.iter().filter(|r| bucket_of(edges, r.distance) == Some(k)).collect();
        row(&bucket_label(edges, k), &rs);
    }
    row("mean", &results.iter().collect::<Vec<_>>());
    let mut pairs = String::from("pair,distance,tp,fp,fn,tn,iou,precision,recall\n");
    for (k, r) in results.iter().enumerate() {
        let c = r.confusion;
        let m = r.metrics;
        writeln!(
            pairs,
            "{k},{:.6},{},{},{},{},{},{},{}",
            r.distance,
            c.tp,
            c.fp,
            c.fn_,
            c.tn,
            fmt_opt(m.iou),
            fmt_opt(m.precision),
            fmt_opt(m.recall)
        )
        .unwrap();
    }
    (table, pairs, summary)
}

/// Per-bucket registration table, per-pair rows and a key/value summary.
pub fn registration_tables(edges: &[f64], results: &[RegistrationPairResult], rte_max: f64, rre_max: f64) -> (String, String, String) {
    let mut table = String::from("bucket,pairs,rr_overlap,rr_no_overlap,rte_m,rre_deg\n");
    let mut summary = String::new();
    let mut row = |label: &str, rs: &[&RegistrationPairResult]| {
        let with: Vec<_> = rs.iter().map(|r| r.filtered).collect();
        let without: Vec<_> = rs.iter().map(|r| r.unfiltered).collect();
        let rr = |v: &[RegistrationMetrics]| evaluation::registration_recall(v, rte_max, rre_max).ok();
        let ok: Vec<_> = with.iter().filter(|m| m.passes(rte_max, rre_max)).collect();
        let rte = evaluation::mean_defined(ok.iter().map(|m| Some(m.rte))).0;
        let rre = evaluation::mean_defined(ok.iter().map(|m| Some(m.rre))).0;
        let (a, b) = (fmt_opt(rr(&with)), fmt_opt(rr(&without)));
        writeln!(table, "{label},{},{a},{b},{},{}", rs.len(), fmt_opt(rte), fmt_opt(rre)).unwrap();
        writeln!(summary, "registration.{label}.pairs={}", rs.len()).unwrap();
        writeln!(summary, "registration.{label}.rr_overlap={a}").unwrap();
        writeln!(summary, "registration.{label}.rr_no_overlap={b}").unwrap();
        writeln!(summary, "registration.{label}.rte_m={}", fmt_opt(rte)).unwrap();
        writeln!(summary, "registration.{label}.rre_deg={}", fmt_opt(rre)).unwrap();
    };
    for k in 0..edges.len() - 1 {
        let rs: Vec<_> = results.iter().filter(|r| bucket_of(edges, r.distance) == Some(k)).collect();
        row(&bucket_label(edges, k), &rs);
    }
    row("mean", &results.iter().collect::<Vec<_>>());
    let mut pairs = String::from("pair,distance,success,rte_m,rre_deg,success_no_overlap,rte_no_overlap_m,rre_no_overlap_deg,tau\n");
    for (k, r) in results.iter().enumerate() {
        let (a, b) = (r.filtered, r.unfiltered);
        writeln!(
            pairs,
            "{k},{:.6},{},{:.6},{:.6},{},{:.6},{:.6},{:.6}",
            r.distance, a.success, a.rte, a.rre, b.success, b.rte, b.rre, r.tau
        )
        .unwrap();
    }
    (table, pairs, summary)
}

/// Loop-closure selections and a key/value summary.
pub fn loop_tables(report: &RecallReport) -> (String, String, String) {
    let table = format!("queries,correct,recall_at_1\n{},{},{:.6}\n", report.queries, report.correct, report.recall);
    let mut pairs = String::from("query,selected,tau\n");
    for (q, j, s) in &report.selections {
        writeln!(pairs, "{q},{j},{s:.9}").unwrap();
    }
    let summary = format!(
        "loop.queries={}\nloop.correct={}\nloop.recall_at_1={:.6}\n",
        report.queries, report.correct, report.recall
    );
    (table, pairs, summary)
}

/// Inputs of `cmd_eval`.
#[derive(Debug, Clone)]
pub struct EvalInputs {
    pub checkpoint: Option<PathBuf>,
    /// Pair manifest for overlap and registration; sequence directory with `poses.txt` for loop closure.
    pub data: PathBuf,
    pub protocol: Protocol,
    pub out: PathBuf,
    pub oracle: bool,
}

/// `cmd_eval`: writes `<protocol>.csv`, `<protocol>_pairs.csv` and `<protocol>_summary.txt` under `out`.
pub fn cmd_eval(cfg: &RunConfig, inputs: &EvalInputs) -> Result<String> {
    if inputs.checkpoint.is_none() && !inputs.oracle {
        return Err(Error::Config("a checkpoint is required unless --oracle is given".into()));
    }
    let (model, store, _) = load_model(cfg, inputs.checkpoint.as_deref())?;
    let edges = &cfg.eval.bucket_edges;
    let (name, (table, pairs, summary)) = match inputs.protocol {
        Protocol::LoopClosure => {
            let scans = dataset::sequence_scans(&inputs.data)?;
            let poses = bev::load_poses(inputs.data.join("poses.txt"))?;
            let frames = scans.iter().map(bev::load_kitti_bin).collect::<Result<Vec<_>>>()?;
            let report = eval_loop(&model, &store, &frames, &poses, cfg, inputs.oracle)?;
            ("loopclosure", loop_tables(&report))
        }
        protocol => {
            let entries = load_manifest(&inputs.data)?;
            if entries.is_empty() {
                return Err(Error::EmptyInput("manifest has no pairs"));
            }
            let data = load_pair_data(&model, &entries)?;
            if protocol == Protocol::Overlap {
                let r = eval_overlap(&model, &store, &data, cfg.eval.overlap_threshold, inputs.oracle)?;
                ("overlap", overlap_tables(edges, &r))
            } else {
                let r = eval_registration(&model, &store, &data, cfg, inputs.oracle)?;
                ("registration", registration_tables(edges, &r, cfg.eval.rte_threshold, cfg.eval.rre_threshold))
            }
        }
    };
    create_dir(&inputs.out)?;
    write_file(&inputs.out.join(format!("{name}.csv")), &table)?;
    write_file(&inputs.out.join(format!("{name}_pairs.csv")), &pairs)?;
    write_file(&inputs.out.join(format!("{name}_summary.txt")), &summary)?;
    Ok(table)
}

/// Applies a `section.key=value` override; the value is parsed as TOML, falling back to a string.
pub fn apply_override(cfg: &RunConfig, assignment: &str) -> Result<RunConfig> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let mut root = toml::Value::try_from(cfg).map_err(|e| Error::Config(e.to_string()))?;
    let mut node = &mut root;
    let parts: Vec<&str> = key.trim().split('.').collect();
    for (n, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{key}`: `{part}` is not inside a section")))?;
        if !table.contains_key(*part) {
            return Err(Error::Config(format!("unknown configuration key `{key}`")));
        }
        if n + 1 == parts.len() {
            table.insert(part.to_string(), parsed.clone());
            break;
        }
        node = table.get_mut(*part).expect("key present");
    }
    let out: RunConfig = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    out.validate()?;
    Ok(out)
}

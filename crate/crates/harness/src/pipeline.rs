//! The five pipeline stages and their bookkeeping.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use taililc::dpca::SignalDataset;
use taililc::ilc::{feedforward_contraction, IlcFilters};
use taililc::plant::{build_controller, build_plant, LoopSet};
use taililc::policies::{
    build_tail_policy, label_dataset, nn_ilc_build, EvalMember, Evaluation, Expert, PolicyEvalReport, Source,
    Split, StudentErrors,
};
use taililc::setpoint::{build_class, split_class, TrajectoryClass};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::manifest::{FileRecord, RunManifest, Stage, StageRecord, StageStatus};
use crate::models::{load_nn_ilc, load_tail, save_nn_ilc, save_tail};
use crate::store::{atomic_write, csv_bytes, read_json, read_matrix, sha256_file, write_json, write_matrix};

/// Non-deterministic measurements; kept out of the checksummed artifacts.
pub const TIMINGS_FILE: &str = "runlog/timings.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    UpToDate,
    Ran,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Student {
    Tail,
    NnIlc,
}

impl Student {
    pub fn stage(&self) -> Stage {
        match self {
            Student::Tail => Stage::TrainTail,
            Student::NnIlc => Stage::TrainNnIlc,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: usize,
    pub split: Split,
    pub trials: usize,
    pub converged: bool,
    pub err_2: Vec<f64>,
    pub err_inf: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub horizon: usize,
    pub delay: usize,
    pub learned_len: usize,
    pub lambda: f64,
    pub q_cutoff_hz: Option<f64>,
    /// Contraction factor of the error recursion.
    pub margin: f64,
    /// Contraction factor of the feedforward recursion.
    pub feedforward_contraction: f64,
    pub trials: BTreeMap<usize, usize>,
    pub not_converged: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitValues {
    pub train: Option<f64>,
    pub test: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub sources: Vec<Source>,
    pub n_train: usize,
    pub n_test: usize,
    /// Mean over members of the constant-velocity-window peak error.
    pub mean_peak: BTreeMap<Source, SplitValues>,
    pub mean_rms: BTreeMap<Source, SplitValues>,
    pub tail: Option<StudentErrors>,
    pub nn_ilc: Option<StudentErrors>,
    pub failed_cells: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub t_train_tail: Option<f64>,
    pub t_train_nn_ilc: Option<f64>,
    pub t_predict_full_tail: Option<f64>,
    pub t_predict_per_sample_tail: Option<f64>,
    pub t_predict_full_nn_ilc: Option<f64>,
    pub t_predict_per_sample_nn_ilc: Option<f64>,
}

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub root: PathBuf,
    pub jobs: usize,
    pub force: bool,
    pub quiet: bool,
}

fn rel(root: &Path, p: &Path) -> String {
    p.strip_prefix(root).unwrap_or(p).components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
}

fn sources_need(sources: &[Source], student: Student) -> bool {
    sources.iter().any(|s| match student {
        Student::Tail => matches!(s, Source::Tail | Source::TailMassFf),
        Student::NnIlc => matches!(s, Source::NnIlc | Source::NnIlcMassFf),
    })
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, jobs: usize, force: bool) -> Self {
        let root = cfg.output_root();
        Self { cfg, root, jobs: jobs.max(1), force, quiet: false }
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn manifest(&self) -> Result<RunManifest> {
        RunManifest::load(&self.root)
    }

    fn require(&self, m: &RunManifest, stage: Stage, sources: &[Source]) -> Result<()> {
        match m.status(stage, &self.cfg.fingerprint(stage, sources), &self.root)? {
            StageStatus::Current => Ok(()),
            StageStatus::Missing => Err(HarnessError::Stale(format!("stage `{stage}` has not been run"))),
            StageStatus::Stale => Err(HarnessError::Stale(format!("outputs of `{stage}` belong to a different config"))),
            StageStatus::Corrupt(p) => Err(HarnessError::Stale(format!("`{stage}` output {p} fails its checksum"))),
        }
    }

    /// Checks inputs and existing outputs. `None` means the stage is
    /// already complete for this config.
    fn begin(&self, stage: Stage, upstream: &[Stage], sources: &[Source]) -> Result<Option<RunManifest>> {
        let mut m = self.manifest()?;
        for &up in upstream {
            self.require(&m, up, sources)?;
        }
        match m.status(stage, &self.cfg.fingerprint(stage, sources), &self.root)? {
            StageStatus::Current if !self.force => {
                self.say(format!("{stage}: up-to-date"));
                return Ok(None);
            }
            StageStatus::Stale if !self.force => {
                return Err(HarnessError::Stale(format!(
                    "outputs of `{stage}` in {} belong to a different config; rerun with --force",
                    self.root.display()
                )))
            }
            StageStatus::Corrupt(p) if !self.force => {
                return Err(HarnessError::Stale(format!("`{stage}` output {p} fails its checksum; rerun with --force")))
            }
            _ => {}
        }
        m.invalidate(stage);
        m.config_fingerprint = self.cfg.config_fingerprint();
        Ok(Some(m))
    }

    fn finish(
        &self,
        mut m: RunManifest,
        stage: Stage,
        sources: &[Source],
        files: &[PathBuf],
        timings: BTreeMap<String, f64>,
    ) -> Result<()> {
        let files = files
            .iter()
            .map(|p| {
                Ok(FileRecord { path: rel(&self.root, p), sha256: sha256_file(p)?, bytes: std::fs::metadata(p)?.len() })
            })
            .collect::<Result<Vec<_>>>()?;
        m.stages.insert(stage, StageRecord { fingerprint: self.cfg.fingerprint(stage, sources), files, timings });
        m.save(&self.root)
    }

    pub fn class(&self) -> Result<(TrajectoryClass, TrajectoryClass)> {
        let class = build_class(&self.cfg.grid, self.cfg.plant.ts)?;
        Ok(split_class(&class, &self.cfg.split)?)
    }

    pub fn expert(&self, horizon: usize) -> Result<Expert> {
        let cfg = &self.cfg;
        let loops = LoopSet::new(build_plant(&cfg.plant)?, build_controller(&cfg.plant, &cfg.controller)?, horizon)?;
        let filters = IlcFilters::design(&loops, &cfg.ilc)?;
        Ok(Expert::new(loops, filters, cfg.expert, cfg.expert_base, cfg.plant.mass)?)
    }

    fn trajectory_file(&self, id: usize) -> PathBuf {
        self.path(&format!("gen/traj_{id:03}.csv"))
    }

    pub fn gen(&self) -> Result<Outcome> {
        let Some(m) = self.begin(Stage::Gen, &[], &[])? else { return Ok(Outcome::UpToDate) };
        let (train, test) = self.class()?;
        let mut files = Vec::new();
        for c in [&train, &test] {
            for (t, &id) in c.members.iter().zip(&c.tuple_ids) {
                let mut bytes = Vec::new();
                t.write_csv_to(&mut bytes)?;
                let p = self.trajectory_file(id);
                atomic_write(&p, &bytes)?;
                files.push(p);
            }
        }
        files.sort();
        self.finish(m, Stage::Gen, &[], &files, BTreeMap::new())?;
        self.say(format!(
            "gen: {} trajectories of {} samples ({} train / {} test)",
            files.len(),
            train.samples(),
            train.len(),
            test.len()
        ));
        Ok(Outcome::Ran)
    }

    pub fn label(&self) -> Result<Outcome> {
        let Some(m) = self.begin(Stage::Label, &[Stage::Gen], &[])? else { return Ok(Outcome::UpToDate) };
        let start = Instant::now();
        let (train, test) = self.class()?;
        let expert = self.expert(train.samples())?;
        let margin = expert.margin()?;
        let ff = feedforward_contraction(expert.loops.ilc_j(), &expert.filters)?;
        self.say(format!("label: convergence margin {margin:.4}, feedforward contraction {ff:.4}"));
        if margin >= 1.0 {
            self.say("label: warning: margin >= 1, monotone convergence is not guaranteed");
        }
        let lab_train = label_dataset(&expert, &train.members, &train.tuple_ids, self.jobs)?;
        let lab_test = label_dataset(&expert, &test.members, &test.tuple_ids, self.jobs)?;

        let mut files = Vec::new();
        for (name, mat) in [
            ("label/h_r.bin", &lab_train.h_r.h),
            ("label/h_f.bin", &lab_train.h_f.h),
            ("label/test_h_r.bin", &lab_test.h_r.h),
            ("label/test_h_f.bin", &lab_test.h_f.h),
        ] {
            let p = self.path(name);
            write_matrix(&p, mat)?;
            files.push(p);
        }
        let mut runs = Vec::new();
        for (split, c, lab) in [(Split::Train, &train, &lab_train), (Split::Test, &test, &lab_test)] {
            for (&id, r) in c.tuple_ids.iter().zip(&lab.runs) {
                runs.push(RunRecord {
                    id,
                    split,
                    trials: r.trials,
                    converged: r.converged,
                    err_2: r.err_2.clone(),
                    err_inf: r.err_inf.clone(),
                });
            }
        }
        runs.sort_by_key(|r| r.id);
        let summary = LabelSummary {
            horizon: expert.loops.horizon(),
            delay: expert.loops.delay(),
            learned_len: expert.learned_len(),
            lambda: expert.filters.lambda,
            q_cutoff_hz: expert.filters.q_cutoff_hz,
            margin,
            feedforward_contraction: ff,
            trials: runs.iter().map(|r| (r.id, r.trials)).collect(),
            not_converged: runs.iter().filter(|r| !r.converged).map(|r| r.id).collect(),
        };
        for (name, value) in [("label/runs.json", serde_json::to_value(&runs)?), ("label/summary.json", serde_json::to_value(&summary)?)] {
            let p = self.path(name);
            write_json(&p, &value)?;
            files.push(p);
        }
        let trials: Vec<usize> = runs.iter().map(|r| r.trials).collect();
        self.say(format!(
            "label: {} experts, trials min {} / max {}, {} not converged",
            runs.len(),
            trials.iter().min().copied().unwrap_or(0),
            trials.iter().max().copied().unwrap_or(0),
            summary.not_converged.len()
        ));
        let timings = BTreeMap::from([("wall".to_string(), start.elapsed().as_secs_f64())]);
        self.finish(m, Stage::Label, &[], &files, timings)?;
        Ok(Outcome::Ran)
    }

    pub fn label_summary(&self) -> Result<LabelSummary> {
        read_json(&self.path("label/summary.json"))
    }

    fn dataset(&self, name: &str, ids: &[usize]) -> Result<SignalDataset> {
        let h: DMatrix<f64> = read_matrix(&self.path(name))?;
        Ok(SignalDataset::new(h, ids.to_vec())?)
    }

    pub fn train(&self, which: Student) -> Result<Outcome> {
        let stage = which.stage();
        let Some(m) = self.begin(stage, &[Stage::Label], &[])? else { return Ok(Outcome::UpToDate) };
        let (train, _) = self.class()?;
        let h_f = self.dataset("label/h_f.bin", &train.tuple_ids)?;
        let (name, cfg_train) = match which {
            Student::Tail => ("tail", &self.cfg.tail.train),
            Student::NnIlc => ("nn_ilc", &self.cfg.nn_ilc.train),
        };
        let start = Instant::now();
        let fitted = match which {
            Student::Tail => {
                let h_r = self.dataset("label/h_r.bin", &train.tuple_ids)?;
                build_tail_policy(&h_r, &h_f, &self.cfg.tail).map(|f| (Some(f.policy), None, f.loss_curve))
            }
            Student::NnIlc => {
                let delay = self.label_summary()?.delay;
                nn_ilc_build(&train.members, &h_f, delay, &self.cfg.nn_ilc).map(|f| (None, Some(f.policy), f.loss_curve))
            }
        };
        let t_train = start.elapsed().as_secs_f64();
        let loss_path = self.path(&format!("train/{name}_loss.csv"));
        let (tail, nn, curve) = match fitted {
            Ok(v) => v,
            Err(e @ taililc::Error::TrainingDivergence { .. }) => {
                let taililc::Error::TrainingDivergence { curve, .. } = &e else { unreachable!() };
                let p = self.path(&format!("train/{name}_loss_diverged.csv"));
                atomic_write(&p, &loss_csv(curve)?)?;
                return Err(HarnessError::TrainingDiverged { curve: p.display().to_string(), source: e });
            }
            Err(e) => return Err(e.into()),
        };
        atomic_write(&loss_path, &loss_csv(&curve)?)?;
        let model = self.path(&format!("train/{name}.json"));
        let mut files = match (tail, nn) {
            (Some(p), _) => save_tail(&model, &p, cfg_train)?.to_vec(),
            (_, Some(p)) => save_nn_ilc(&model, &p, cfg_train)?.to_vec(),
            _ => unreachable!("one student is trained"),
        };
        files.push(loss_path);
        self.say(format!(
            "train {name}: {} epochs in {t_train:.2} s, final loss {:.3e}",
            curve.len(),
            curve.last().copied().unwrap_or(f64::NAN)
        ));
        self.finish(m, stage, &[], &files, BTreeMap::from([("t_train".to_string(), t_train)]))?;
        Ok(Outcome::Ran)
    }

    pub fn eval(&self, sources: &[Source]) -> Result<Outcome> {
        let mut upstream = vec![Stage::Label];
        let need_tail = sources_need(sources, Student::Tail);
        let need_nn = sources_need(sources, Student::NnIlc);
        if need_tail {
            upstream.push(Stage::TrainTail);
        }
        if need_nn {
            upstream.push(Stage::TrainNnIlc);
        }
        let Some(m) = self.begin(Stage::Eval, &upstream, sources)? else { return Ok(Outcome::UpToDate) };
        let (train, test) = self.class()?;
        let expert = self.expert(train.samples())?;
        let tail = need_tail.then(|| load_tail(&self.path("train/tail.json"))).transpose()?;
        let nn = need_nn.then(|| load_nn_ilc(&self.path("train/nn_ilc.json"))).transpose()?;
        let star_train = read_matrix(&self.path("label/h_f.bin"))?;
        let star_test = read_matrix(&self.path("label/test_h_f.bin"))?;
        let cols = |h: &DMatrix<f64>| h.column_iter().map(|c| c.iter().copied().collect::<Vec<f64>>()).collect::<Vec<_>>();
        let (star_train, star_test) = (cols(&star_train), cols(&star_test));
        let mut members = Vec::new();
        for (split, c, stars) in [(Split::Train, &train, &star_train), (Split::Test, &test, &star_test)] {
            for ((t, &id), f) in c.members.iter().zip(&c.tuple_ids).zip(stars) {
                members.push(EvalMember { id, split, traj: t, f_star: Some(f) });
            }
        }
        members.sort_by_key(|m| m.id);
        let evaluation = Evaluation {
            expert: &expert,
            tail: tail.as_ref(),
            nn_ilc: nn.as_ref(),
            sources: sources.to_vec(),
            jobs: self.jobs,
            keep_traces: true,
        };
        let (report, predict) = evaluation.run(&members);
        let failed = report.cells.iter().filter(|c| c.error.is_some()).count();
        if failed == report.cells.len() {
            let first = report.cells.first().and_then(|c| c.error.clone()).unwrap_or_default();
            return Err(HarnessError::EvalFailed(first));
        }

        let mut files = Vec::new();
        let p = self.path("eval/report.csv");
        atomic_write(&p, &report_csv(&report)?)?;
        files.push(p);
        for m in &members {
            let p = self.path(&format!("eval/traces/traj_{:03}.csv", m.id));
            atomic_write(&p, &trace_csv(&report, m.id, self.cfg.plant.ts)?)?;
            files.push(p);
        }
        let summary = summarize(&report, sources, train.len(), test.len());
        let p = self.path("eval/summary.json");
        write_json(&p, &summary)?;
        files.push(p);

        let manifest_now = self.manifest()?;
        let t_train = |s: Stage| manifest_now.stages.get(&s).and_then(|r| r.timings.get("t_train").copied());
        let timings = Timings {
            t_train_tail: need_tail.then(|| t_train(Stage::TrainTail)).flatten(),
            t_train_nn_ilc: need_nn.then(|| t_train(Stage::TrainNnIlc)).flatten(),
            t_predict_full_tail: predict.tail_full,
            t_predict_per_sample_tail: predict.tail_per_sample,
            t_predict_full_nn_ilc: predict.nn_ilc_full,
            t_predict_per_sample_nn_ilc: predict.nn_ilc_per_sample,
        };
        write_json(&self.path(TIMINGS_FILE), &timings)?;
        self.say(render_table(&summary, &timings));
        if failed > 0 {
            self.say(format!("eval: {failed} of {} cells failed, see eval/report.csv", report.cells.len()));
        }
        let mut stage_timings = BTreeMap::new();
        for (k, v) in [
            ("t_predict_full_tail", timings.t_predict_full_tail),
            ("t_predict_per_sample_tail", timings.t_predict_per_sample_tail),
            ("t_predict_full_nn_ilc", timings.t_predict_full_nn_ilc),
            ("t_predict_per_sample_nn_ilc", timings.t_predict_per_sample_nn_ilc),
        ] {
            if let Some(v) = v {
                stage_timings.insert(k.to_string(), v);
            }
        }
        self.finish(m, Stage::Eval, sources, &files, stage_timings)?;
        Ok(Outcome::Ran)
    }

    pub fn summary(&self) -> Result<EvalSummary> {
        read_json(&self.path("eval/summary.json"))
    }

    pub fn timings(&self) -> Result<Timings> {
        read_json(&self.path(TIMINGS_FILE))
    }

    /// Runs every stage from `from` on; earlier stages must be complete.
    pub fn repro(&self, from: Stage) -> Result<()> {
        for stage in Stage::ALL.into_iter().filter(|s| *s >= from) {
            match stage {
                Stage::Gen => self.gen()?,
                Stage::Label => self.label()?,
                Stage::TrainTail => self.train(Student::Tail)?,
                Stage::TrainNnIlc => self.train(Student::NnIlc)?,
                Stage::Eval => self.eval(&Source::ALL)?,
            };
        }
        Ok(())
    }

    /// Every checksummed artifact, as recorded in the manifest.
    pub fn checksums(&self) -> Result<BTreeMap<String, String>> {
        let m = self.manifest()?;
        Ok(m.stages.values().flat_map(|r| r.files.iter().map(|f| (f.path.clone(), f.sha256.clone()))).collect())
    }
}

fn loss_csv(curve: &[f64]) -> Result<Vec<u8>> {
    csv_bytes(&["epoch", "loss"], curve.iter().enumerate().map(|(i, l)| vec![(i + 1).to_string(), format!("{l:e}")]))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Test => "test",
    }
}

fn report_csv(report: &PolicyEvalReport) -> Result<Vec<u8>> {
    csv_bytes(
        &["id", "split", "source", "peak", "rms", "error"],
        report.cells.iter().map(|c| {
            vec![
                c.id.to_string(),
                split_name(c.split).to_string(),
                c.source.name().to_string(),
                opt(c.peak),
                opt(c.rms),
                c.error.clone().unwrap_or_default(),
            ]
        }),
    )
}

/// Window error traces of one member, one column per source.
fn trace_csv(report: &PolicyEvalReport, id: usize, ts: f64) -> Result<Vec<u8>> {
    let traces: Vec<_> = report.traces.iter().filter(|t| t.id == id).collect();
    let mut header = vec!["k", "t"];
    header.extend(traces.iter().map(|t| t.source.name()));
    let len = traces.first().map_or(0, |t| t.error.len());
    let start = traces.first().map_or(0, |t| t.window_start);
    csv_bytes(
        &header,
        (0..len).map(|i| {
            let k = start + i;
            let mut row = vec![k.to_string(), format!("{:e}", k as f64 * ts)];
            row.extend(traces.iter().map(|t| format!("{:e}", t.error[i])));
            row
        }),
    )
}

pub fn summarize(report: &PolicyEvalReport, sources: &[Source], n_train: usize, n_test: usize) -> EvalSummary {
    let mean = |source: Source, split: Split, pick: fn(&taililc::policies::EvalCell) -> Option<f64>| {
        let v: Vec<f64> = report.cells.iter().filter(|c| c.source == source && c.split == split).filter_map(pick).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let table = |pick: fn(&taililc::policies::EvalCell) -> Option<f64>| {
        sources
            .iter()
            .map(|&s| (s, SplitValues { train: mean(s, Split::Train, pick), test: mean(s, Split::Test, pick) }))
            .collect()
    };
    EvalSummary {
        sources: sources.to_vec(),
        n_train,
        n_test,
        mean_peak: table(|c| c.peak),
        mean_rms: table(|c| c.rms),
        tail: report.tail.clone(),
        nn_ilc: report.nn_ilc.clone(),
        failed_cells: report.cells.iter().filter(|c| c.error.is_some()).count(),
    }
}

/// Side-by-side comparison of both students.
pub fn render_table(s: &EvalSummary, t: &Timings) -> String {
    let f = |v: Option<f64>| v.map(|x| format!("{x:.3e}")).unwrap_or_else(|| "-".into());
    let peak = |src: Source| s.mean_peak.get(&src).and_then(|v| v.test);
    let rows = [
        ("T_train [s]", t.t_train_tail, t.t_train_nn_ilc),
        ("T_predict per sample [s]", t.t_predict_per_sample_tail, t.t_predict_per_sample_nn_ilc),
        ("T_predict full signal [s]", t.t_predict_full_tail, t.t_predict_full_nn_ilc),
        ("e_train", s.tail.as_ref().and_then(|e| e.e_train), s.nn_ilc.as_ref().and_then(|e| e.e_train)),
        ("e_test", s.tail.as_ref().and_then(|e| e.e_test), s.nn_ilc.as_ref().and_then(|e| e.e_test)),
        ("peak error, test, + mass ff", peak(Source::TailMassFf), peak(Source::NnIlcMassFf)),
    ];
    let mut out = format!("{:<30}{:>14}{:>14}\n", "", "TAIL-ILC", "NN-ILC");
    for (name, a, b) in rows {
        out += &format!("{name:<30}{:>14}{:>14}\n", f(a), f(b));
    }
    out += "\nmean window peak error      train          test\n";
    for (src, v) in &s.mean_peak {
        out += &format!("{:<20}{:>14}{:>14}\n", src.name(), f(v.train), f(v.test));
    }
    out
}

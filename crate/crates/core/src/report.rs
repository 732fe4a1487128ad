//! Evaluation of trained models on all stimulus versions and the report files.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{StudyClip, VersionedDataset};
use crate::error::{io_err, Error, Result};
use crate::eval::{
    draw_choice_sets, human_aligned_accuracy, predict_all, topk_accuracy, ChoiceSet,
};
use crate::manifest::Split;
use crate::nets::{InputMode, Network, Topology};
use crate::stats::{paired_t_test, TTestResult};
use crate::stimpipe::StimulusVersion;

pub const REPORT_FORMAT: &str = "bodyscene.report.v1";

/// A trained model to be evaluated, labelled for the report.
pub struct ModelEntry<'a> {
    pub name: String,
    pub seed: u64,
    pub network: &'a Network,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VersionScores {
    pub human_aligned: f64,
    pub top1: f64,
    pub top5: f64,
    pub correct: usize,
    pub trials: usize,
    pub ties: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    pub orig: f64,
    pub body: f64,
    pub bg: f64,
}

impl Triple {
    pub fn get(&self, v: StimulusVersion) -> f64 {
        match v {
            StimulusVersion::Original => self.orig,
            StimulusVersion::BodyOnly => self.body,
            StimulusVersion::BackgroundOnly => self.bg,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub name: String,
    pub topology: Topology,
    pub input_mode: InputMode,
    pub seed: u64,
    pub orig: VersionScores,
    pub body: VersionScores,
    pub bg: VersionScores,
}

impl ModelRow {
    pub fn scores(&self, v: StimulusVersion) -> &VersionScores {
        match v {
            StimulusVersion::Original => &self.orig,
            StimulusVersion::BodyOnly => &self.body,
            StimulusVersion::BackgroundOnly => &self.bg,
        }
    }

    pub fn human_aligned(&self) -> Triple {
        Triple {
            orig: self.orig.human_aligned,
            body: self.body.human_aligned,
            bg: self.bg.human_aligned,
        }
    }
}

/// Mean human-aligned accuracy over all seeds of one (topology, mode) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub topology: Topology,
    pub input_mode: InputMode,
    pub seeds: Vec<u64>,
    pub human_aligned: Triple,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionalFlags {
    pub input_mode: InputMode,
    pub baseline_body_near_chance: bool,
    pub baseline_bg_above_baseline_body: bool,
    pub domainnet_body_above_baseline_body: bool,
    pub domainnet_body_above_domainnet_bg: bool,
    pub domainnet_orig_at_least_baseline_orig: bool,
}

/// Published accuracies in percent, echoed for comparison only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub metric: String,
    pub model: String,
    pub orig: f64,
    pub body: f64,
    pub bg: f64,
}

fn reference(metric: &str, model: &str, v: [f64; 3]) -> ReferenceRow {
    ReferenceRow {
        metric: metric.into(),
        model: model.into(),
        orig: v[0],
        body: v[1],
        bg: v[2],
    }
}

pub fn reference_rows() -> Vec<ReferenceRow> {
    let hac = "5-choice accuracy";
    vec![
        reference(hac, "Baseline frames", [52.50, 20.00, 40.00]),
        reference(hac, "Baseline frames+flows", [57.50, 22.50, 47.50]),
        reference(hac, "DomainNet frames", [66.25, 62.50, 42.50]),
        reference(hac, "DomainNet frames+flows", [75.00, 73.75, 38.75]),
        reference(hac, "Humans", [98.43, 93.93, 76.29]),
        reference("top-1", "Baseline frames", [5.21, 0.97, 2.65]),
        reference("top-1", "Baseline frames+flows", [7.76, 2.25, 5.66]),
        reference("top-1", "DomainNet frames", [16.16, 14.15, 4.42]),
        reference("top-1", "DomainNet frames+flows", [24.9, 25.85, 5.83]),
        reference("top-5", "Baseline frames", [21.28, 6.42, 12.62]),
        reference("top-5", "Baseline frames+flows", [23.93, 5.07, 15.18]),
        reference("top-5", "DomainNet frames", [37.78, 39.17, 22.27]),
        reference("top-5", "DomainNet frames+flows", [52.89, 55.39, 19.08]),
    ]
}

/// Published human paired comparison of body-only against background-only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HumanReference {
    pub participants: usize,
    pub t: f64,
    pub df: usize,
    pub p_below: f64,
}

pub fn human_reference() -> HumanReference {
    HumanReference {
        participants: 28,
        t: 13.27,
        df: 27,
        p_below: 0.001,
    }
}

/// Per-participant block accuracies (background-only, body-only, original).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticipantBlocks {
    pub bg: f64,
    pub body: f64,
    pub orig: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HumanSummary {
    pub participants: usize,
    pub mean: Triple,
    /// Body-only against background-only.
    pub body_vs_bg: Option<TTestResult>,
}

pub fn summarize_humans(results: &[ParticipantBlocks]) -> Result<HumanSummary> {
    let n = results.len();
    if n == 0 {
        return Err(Error::Invalid("no participant results".into()));
    }
    let mean = |f: fn(&ParticipantBlocks) -> f64| results.iter().map(f).sum::<f64>() / n as f64;
    let body: Vec<f64> = results.iter().map(|r| r.body).collect();
    let bg: Vec<f64> = results.iter().map(|r| r.bg).collect();
    let body_vs_bg = match paired_t_test(&body, &bg) {
        Ok(t) => Some(t),
        Err(Error::Degenerate(_)) | Err(Error::Invalid(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(HumanSummary {
        participants: n,
        mean: Triple {
            orig: mean(|r| r.orig),
            body: mean(|r| r.body),
            bg: mean(|r| r.bg),
        },
        body_vs_bg,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportOptions {
    pub foil_seed: u64,
    pub choices_per_trial: usize,
    pub top_k: usize,
    /// Categories eligible as answers; all categories when `None`.
    pub category_subset: Option<Vec<usize>>,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            foil_seed: 0,
            choices_per_trial: 5,
            top_k: 5,
            category_subset: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub categories: Vec<String>,
    pub category_subset: Vec<usize>,
    pub foil_seed: u64,
    pub choices_per_trial: usize,
    pub top_k: usize,
    pub chance: f64,
    pub choice_sets: Vec<ChoiceSet>,
    pub models: Vec<ModelRow>,
    pub summary: Vec<GroupSummary>,
    pub flags: Vec<DirectionalFlags>,
    pub human: Option<HumanSummary>,
    pub reference: Vec<ReferenceRow>,
    pub human_reference: HumanReference,
}

/// Scores one model on every version of the given clips.
pub fn evaluate_model(
    entry: &ModelEntry<'_>,
    clips: &[&StudyClip],
    choice_sets: &[ChoiceSet],
    top_k: usize,
) -> Result<ModelRow> {
    let labels: Vec<usize> = clips.iter().map(|c| c.action).collect();
    let mut per_version = Vec::with_capacity(3);
    for v in StimulusVersion::ALL {
        let probs = predict_all(entry.network, clips, v)?;
        let ha = human_aligned_accuracy(&probs, choice_sets)?;
        per_version.push(VersionScores {
            human_aligned: ha.accuracy,
            top1: topk_accuracy(&probs, &labels, 1)?,
            top5: topk_accuracy(&probs, &labels, top_k)?,
            correct: ha.correct,
            trials: ha.trials,
            ties: ha.ties,
        });
    }
    Ok(ModelRow {
        name: entry.name.clone(),
        topology: entry.network.spec.topology,
        input_mode: entry.network.spec.input_mode,
        seed: entry.seed,
        orig: per_version[0],
        body: per_version[1],
        bg: per_version[2],
    })
}

/// Evaluates every model on every version of the test clips whose category
/// is in the subset.
pub fn build_report(
    models: &[ModelEntry<'_>],
    data: &VersionedDataset,
    options: &ReportOptions,
    human: Option<&[ParticipantBlocks]>,
) -> Result<EvalReport> {
    let k = data.num_classes();
    let subset = options
        .category_subset
        .clone()
        .unwrap_or_else(|| (0..k).collect());
    if let Some(&bad) = subset.iter().find(|&&c| c >= k) {
        return Err(Error::Invalid(format!(
            "category {bad} outside the {k} categories"
        )));
    }
    if options.top_k == 0 || options.top_k > k {
        return Err(Error::Invalid(format!(
            "top_k = {} must lie in 1..={k}",
            options.top_k
        )));
    }
    for c in &data.clips {
        for v in StimulusVersion::ALL {
            if c.version(v).frames.len() != c.len() {
                return Err(Error::Invalid(format!(
                    "clip {:?} lacks a complete {v} version",
                    c.id
                )));
            }
        }
    }
    let clips: Vec<&StudyClip> = data
        .clips
        .iter()
        .filter(|c| c.split == Split::Test && subset.contains(&c.action))
        .collect();
    if clips.is_empty() {
        return Err(Error::Invalid(
            "no test clips in the category subset".into(),
        ));
    }
    let ids: Vec<(String, usize)> = clips.iter().map(|c| (c.id.clone(), c.action)).collect();
    let choice_sets =
        draw_choice_sets(&ids, &subset, options.choices_per_trial, options.foil_seed)?;
    let rows = models
        .iter()
        .map(|m| {
            if m.network.spec.num_classes != k {
                return Err(Error::Invalid(format!(
                    "model {} has {} classes, dataset {k}",
                    m.name, m.network.spec.num_classes
                )));
            }
            evaluate_model(m, &clips, &choice_sets, options.top_k)
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&rows);
    let chance = 1.0 / options.choices_per_trial as f64;
    let flags = directional_flags(&summary, chance);
    Ok(EvalReport {
        format: REPORT_FORMAT.into(),
        categories: data.categories.clone(),
        category_subset: subset,
        foil_seed: options.foil_seed,
        choices_per_trial: options.choices_per_trial,
        top_k: options.top_k,
        chance,
        choice_sets,
        models: rows,
        summary,
        flags,
        human: human.map(summarize_humans).transpose()?,
        reference: reference_rows(),
        human_reference: human_reference(),
    })
}

pub fn summarize(rows: &[ModelRow]) -> Vec<GroupSummary> {
    let mut groups: Vec<GroupSummary> = Vec::new();
    for topology in [Topology::Baseline, Topology::DomainNet] {
        for input_mode in [InputMode::Frames, InputMode::FramesFlows] {
            let members: Vec<&ModelRow> = rows
                .iter()
                .filter(|r| r.topology == topology && r.input_mode == input_mode)
                .collect();
            if members.is_empty() {
                continue;
            }
            let n = members.len() as f64;
            let mean = |v: StimulusVersion| {
                members
                    .iter()
                    .map(|r| r.scores(v).human_aligned)
                    .sum::<f64>()
                    / n
            };
            groups.push(GroupSummary {
                topology,
                input_mode,
                seeds: members.iter().map(|r| r.seed).collect(),
                human_aligned: Triple {
                    orig: mean(StimulusVersion::Original),
                    body: mean(StimulusVersion::BodyOnly),
                    bg: mean(StimulusVersion::BackgroundOnly),
                },
            });
        }
    }
    groups
}

/// Qualitative comparisons for every input mode that has both topologies.
pub fn directional_flags(summary: &[GroupSummary], chance: f64) -> Vec<DirectionalFlags> {
    let find = |t, m| {
        summary
            .iter()
            .find(|g| g.topology == t && g.input_mode == m)
    };
    [InputMode::Frames, InputMode::FramesFlows]
        .into_iter()
        .filter_map(|mode| {
            let b = find(Topology::Baseline, mode)?.human_aligned;
            let d = find(Topology::DomainNet, mode)?.human_aligned;
            Some(DirectionalFlags {
                input_mode: mode,
                baseline_body_near_chance: (b.body - chance).abs() <= 0.10,
                baseline_bg_above_baseline_body: b.bg > b.body,
                domainnet_body_above_baseline_body: d.body > b.body,
                domainnet_body_above_domainnet_bg: d.body > d.bg,
                domainnet_orig_at_least_baseline_orig: d.orig >= b.orig,
            })
        })
        .collect()
}

fn pct(v: f64) -> String {
    format!("{:6.2}", 100.0 * v)
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s =
            serde_json::to_string_pretty(self).map_err(|e| Error::Invalid(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} categories, {} test clips, {} choices per trial (chance {:.1}%), foil seed {}",
            self.category_subset.len(),
            self.choice_sets.len(),
            self.choices_per_trial,
            100.0 * self.chance,
            self.foil_seed
        );
        let header = format!("{:<34} {:>7} {:>7} {:>7}", "model", "orig", "body", "bg");
        let sections: [(&str, fn(&VersionScores) -> f64); 3] = [
            ("5-choice accuracy (%)", |s| s.human_aligned),
            ("top-1 accuracy (%)", |s| s.top1),
            ("top-k accuracy (%)", |s| s.top5),
        ];
        for (title, get) in sections {
            let title = title.replace("top-k", &format!("top-{}", self.top_k));
            let _ = writeln!(out, "\n{title}\n{header}");
            for r in &self.models {
                let _ = writeln!(
                    out,
                    "{:<34} {:>7} {:>7} {:>7}",
                    r.name,
                    pct(get(&r.orig)),
                    pct(get(&r.body)),
                    pct(get(&r.bg))
                );
            }
        }
        let _ = writeln!(out, "\nmean 5-choice accuracy over seeds (%)\n{header}");
        for g in &self.summary {
            let name = format!("{} {} (n={})", g.topology, g.input_mode, g.seeds.len());
            let h = g.human_aligned;
            let _ = writeln!(
                out,
                "{name:<34} {:>7} {:>7} {:>7}",
                pct(h.orig),
                pct(h.body),
                pct(h.bg)
            );
        }
        if let Some(hs) = &self.human {
            let h = hs.mean;
            let name = format!("participants (n={})", hs.participants);
            let _ = writeln!(
                out,
                "{name:<34} {:>7} {:>7} {:>7}",
                pct(h.orig),
                pct(h.body),
                pct(h.bg)
            );
            if let Some(t) = hs.body_vs_bg {
                let _ = writeln!(
                    out,
                    "participants body vs bg: t({}) = {:.2}, p = {:.3e}",
                    t.df, t.t, t.p
                );
            }
        }
        let _ = writeln!(out, "\ndirectional checks");
        for f in &self.flags {
            let _ = writeln!(out, "  [{}]", f.input_mode);
            let items = [
                (
                    "baseline body-only within 10 points of chance",
                    f.baseline_body_near_chance,
                ),
                (
                    "baseline bg-only > baseline body-only",
                    f.baseline_bg_above_baseline_body,
                ),
                (
                    "domainnet body-only > baseline body-only",
                    f.domainnet_body_above_baseline_body,
                ),
                (
                    "domainnet body-only > domainnet bg-only",
                    f.domainnet_body_above_domainnet_bg,
                ),
                (
                    "domainnet orig >= baseline orig",
                    f.domainnet_orig_at_least_baseline_orig,
                ),
            ];
            for (label, ok) in items {
                let _ = writeln!(out, "    {:<48} {}", label, if ok { "yes" } else { "no" });
            }
        }
        let _ = writeln!(
            out,
            "\npublished reference values (%), not targets\n{:<34} {:>7} {:>7} {:>7}",
            "metric / model", "orig", "body", "bg"
        );
        for r in &self.reference {
            let name = format!("{}: {}", r.metric, r.model);
            let _ = writeln!(
                out,
                "{name:<34} {:>7.2} {:>7.2} {:>7.2}",
                r.orig, r.body, r.bg
            );
        }
        let h = &self.human_reference;
        let _ = writeln!(
            out,
            "published participants body vs bg: t({}) = {:.2}, p < {} (n={})",
            h.df, h.t, h.p_below, h.participants
        );
        out
    }

    /// One line per (model, version) for bar plots.
    pub fn to_plot_csv(&self) -> String {
        let mut out =
            String::from("model,topology,input_mode,seed,version,human_aligned,top1,topk\n");
        for r in &self.models {
            for v in StimulusVersion::ALL {
                let s = r.scores(v);
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    r.name, r.topology, r.input_mode, r.seed, v, s.human_aligned, s.top1, s.top5
                );
            }
        }
        out
    }

    /// Writes `report.txt`, `report.json` and `plot.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let files = [
            ("report.txt", self.to_text()),
            ("report.json", self.to_json()?),
            ("plot.csv", self.to_plot_csv()),
        ];
        for (name, body) in files {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(io_err(&path))?;
        }
        Ok(())
    }
}

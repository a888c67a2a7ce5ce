use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ctc::best_path;
use super::vocab::Vocab;
use super::wer::{wer, ErrorCounts};
use crate::audio::Waveform;
use crate::encoder::SslModel;
use crate::error::{Error, Result};
use crate::frontends::Frontend;
use crate::numerics::Graph;

/// Column label of the no-enhancement condition.
pub const NO_ENH: &str = "NoEnh";

/// A test condition. The clean band has both edges at `+inf`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnrBand {
    pub low: f64,
    pub high: f64,
}

impl SnrBand {
    pub const CLEAN: SnrBand = SnrBand {
        low: f64::INFINITY,
        high: f64::INFINITY,
    };

    pub fn new(low: f64, high: f64) -> Self {
        Self { low, high }
    }

    pub fn is_clean(&self) -> bool {
        self.low.is_infinite() && self.high.is_infinite()
    }

    pub fn label(&self) -> String {
        if self.is_clean() {
            "clean".into()
        } else {
            format!("{}~{} dB", self.low, self.high)
        }
    }
}

#[derive(Clone, Debug)]
pub struct TestUtterance {
    pub id: String,
    pub noisy: Waveform,
    pub words: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct TestSet {
    pub band: SnrBand,
    pub utterances: Vec<TestUtterance>,
}

/// A front-end column. `frontend` is `None` when its checkpoint could not be
/// loaded; its cells are reported as absent.
#[derive(Clone, Debug)]
pub struct FrontendColumn {
    pub id: String,
    pub seen: bool,
    pub frontend: Option<Arc<Frontend>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalCell {
    pub system: String,
    pub frontend: String,
    /// `None` for the no-enhancement column.
    pub frontend_seen: Option<bool>,
    pub band: SnrBand,
    pub utts: usize,
    pub counts: ErrorCounts,
    pub absent: bool,
}

impl EvalCell {
    pub fn wer(&self) -> Option<f64> {
        (!self.absent).then(|| self.counts.wer())
    }
}

/// Enhanced renderings of every test set, shared by all systems.
pub struct EvalInputs {
    sets: Vec<TestSet>,
    columns: Vec<FrontendColumn>,
    /// `enhanced[set][column]`; `None` marks an absent cell.
    enhanced: Vec<Vec<Option<Vec<Waveform>>>>,
}

impl EvalInputs {
    pub fn new(sets: Vec<TestSet>, columns: Vec<FrontendColumn>) -> Result<Self> {
        if columns.iter().any(|c| c.id == NO_ENH) {
            return Err(Error::Config(format!("front-end id `{NO_ENH}` is reserved")));
        }
        let jobs: Vec<(usize, usize)> = (0..sets.len())
            .flat_map(|s| (0..columns.len()).map(move |c| (s, c)))
            .collect();
        let done: Vec<Option<Vec<Waveform>>> = jobs
            .par_iter()
            .map(|&(s, c)| {
                let fe = columns[c].frontend.as_ref()?;
                let out: Result<Vec<Waveform>> = sets[s].utterances.iter().map(|u| fe.enhance(&u.noisy)).collect();
                match out {
                    Ok(v) => Some(v),
                    Err(e) => {
                        log::warn!("front-end `{}` failed on {}: {e}", columns[c].id, sets[s].band.label());
                        None
                    }
                }
            })
            .collect();
        let mut it = done.into_iter();
        let enhanced = sets
            .iter()
            .map(|_| (0..columns.len()).map(|_| it.next().expect("one per job")).collect())
            .collect();
        Ok(Self { sets, columns, enhanced })
    }

    pub fn sets(&self) -> &[TestSet] {
        &self.sets
    }

    pub fn columns(&self) -> &[FrontendColumn] {
        &self.columns
    }
}

/// Symbols decoded from `main`/`aux`. Fusion models take both branches;
/// others read `main` only.
pub fn transcribe(model: &SslModel, vocab: &Vocab, main: &[f64], aux: &[f64]) -> Result<Vec<String>> {
    let mut g = Graph::inference();
    let f = match model.fusion {
        Some(_) => model.forward_two_branch(&mut g, main, aux, None)?,
        None => model.forward_single(&mut g, main, None)?,
    };
    let lp = model.ctc_log_probs(&mut g, f.last)?;
    Ok(vocab.decode(&best_path(g.value(lp).data(), vocab.classes())))
}

fn score(model: &SslModel, vocab: &Vocab, set: &TestSet, enhanced: Option<&[Waveform]>) -> Result<ErrorCounts> {
    let mut total = ErrorCounts::default();
    for (i, u) in set.utterances.iter().enumerate() {
        let main = enhanced.map_or(u.noisy.samples(), |e| e[i].samples());
        let hyp = transcribe(model, vocab, main, u.noisy.samples())?;
        total.add(&wer(&u.words, &hyp));
    }
    Ok(total)
}

/// Scores `model` on every (test set, front-end) cell plus the
/// no-enhancement column of each set.
pub fn evaluate_system(model: &SslModel, system: &str, vocab: &Vocab, inputs: &EvalInputs) -> Result<Vec<EvalCell>> {
    let ncol = inputs.columns.len() + 1;
    let jobs: Vec<(usize, usize)> = (0..inputs.sets.len()).flat_map(|s| (0..ncol).map(move |c| (s, c))).collect();
    jobs.par_iter()
        .map(|&(s, c)| {
            let set = &inputs.sets[s];
            let (frontend, seen, enhanced, absent) = if c == inputs.columns.len() {
                (NO_ENH.to_string(), None, None, false)
            } else {
                let col = &inputs.columns[c];
                let e = inputs.enhanced[s][c].as_deref();
                (col.id.clone(), Some(col.seen), e, e.is_none())
            };
            let counts = if absent {
                ErrorCounts::default()
            } else {
                score(model, vocab, set, enhanced)?
            };
            Ok(EvalCell {
                system: system.to_string(),
                frontend,
                frontend_seen: seen,
                band: set.band,
                utts: if absent { 0 } else { set.utterances.len() },
                counts,
                absent,
            })
        })
        .collect()
}

pub fn evaluate_matrix(
    model: &SslModel,
    system: &str,
    vocab: &Vocab,
    sets: Vec<TestSet>,
    columns: Vec<FrontendColumn>,
) -> Result<EvalReport> {
    let inputs = EvalInputs::new(sets, columns)?;
    Ok(EvalReport {
        cells: evaluate_system(model, system, vocab, &inputs)?,
    })
}

/// Mean WER over the enhanced columns of one system and band.
#[derive(Clone, Debug, PartialEq)]
pub struct AverageRow {
    pub system: String,
    pub band: SnrBand,
    pub frontends: usize,
    pub mean_wer: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub cells: Vec<EvalCell>,
}

pub const CSV_HEADER: &str = "system,frontend,frontend_seen,snr_low,snr_high,utts,wer,sub,del,ins";

fn fmt_f(v: f64) -> String {
    format!("{v}")
}

impl EvalReport {
    pub fn extend(&mut self, other: EvalReport) {
        self.cells.extend(other.cells);
    }

    pub fn cell(&self, system: &str, frontend: &str, band: SnrBand) -> Option<&EvalCell> {
        self.cells
            .iter()
            .find(|c| c.system == system && c.frontend == frontend && c.band == band)
    }

    pub fn systems(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.system) {
                out.push(c.system.clone());
            }
        }
        out
    }

    /// Averages over front-ends per system and band; the no-enhancement
    /// column and absent cells are left out.
    pub fn averages(&self) -> Vec<AverageRow> {
        let mut groups: Vec<((String, SnrBand), Vec<f64>)> = Vec::new();
        for c in &self.cells {
            let key = (c.system.clone(), c.band);
            let idx = match groups.iter().position(|(k, _)| *k == key) {
                Some(i) => i,
                None => {
                    groups.push((key, Vec::new()));
                    groups.len() - 1
                }
            };
            if c.frontend != NO_ENH {
                if let Some(w) = c.wer() {
                    groups[idx].1.push(w);
                }
            }
        }
        groups
            .into_iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|((system, band), v)| AverageRow {
                system,
                band,
                frontends: v.len(),
                mean_wer: v.iter().sum::<f64>() / v.len() as f64,
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for c in &self.cells {
            let seen = match c.frontend_seen {
                Some(true) => "true",
                Some(false) => "false",
                None => "na",
            };
            let wer = c.wer().map_or("absent".to_string(), fmt_f);
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                c.system,
                c.frontend,
                seen,
                fmt_f(c.band.low),
                fmt_f(c.band.high),
                c.utts,
                wer,
                c.counts.sub,
                c.counts.del,
                c.counts.ins
            );
        }
        s
    }

    /// Parses [`to_csv`](Self::to_csv) output. Reference word counts are
    /// recovered from the WER where possible.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(Error::invalid("eval CSV: unexpected header"));
        }
        let bad = |l: &str| Error::invalid(format!("eval CSV: malformed row `{l}`"));
        let mut cells = Vec::new();
        for l in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 10 {
                return Err(bad(l));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(l));
            let int = |i: usize| f[i].parse::<usize>().map_err(|_| bad(l));
            let absent = f[6] == "absent";
            let (sub, del, ins) = (int(7)?, int(8)?, int(9)?);
            let errors = sub + del + ins;
            let ref_words = if absent || errors == 0 {
                0
            } else {
                (errors as f64 / num(6)?).round() as usize
            };
            cells.push(EvalCell {
                system: f[0].to_string(),
                frontend: f[1].to_string(),
                frontend_seen: match f[2] {
                    "true" => Some(true),
                    "false" => Some(false),
                    _ => None,
                },
                band: SnrBand::new(num(3)?, num(4)?),
                utts: int(5)?,
                counts: ErrorCounts {
                    sub,
                    del,
                    ins,
                    ref_words,
                },
                absent,
            });
        }
        Ok(Self { cells })
    }

    pub fn averages_csv(&self) -> String {
        let mut s = String::from("system,snr_low,snr_high,frontends,mean_wer\n");
        for r in self.averages() {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.system,
                fmt_f(r.band.low),
                fmt_f(r.band.high),
                r.frontends,
                fmt_f(r.mean_wer)
            );
        }
        s
    }

    /// Systems as rows, front-ends grouped under each band as columns,
    /// WER in percent.
    pub fn markdown_table(&self) -> String {
        let mut bands: Vec<SnrBand> = Vec::new();
        let mut fronts: BTreeMap<String, Option<bool>> = BTreeMap::new();
        for c in &self.cells {
            if !bands.contains(&c.band) {
                bands.push(c.band);
            }
            if c.frontend != NO_ENH {
                fronts.insert(c.frontend.clone(), c.frontend_seen);
            }
        }
        let mut cols: Vec<String> = fronts
            .iter()
            .map(|(id, seen)| match seen {
                Some(false) => format!("{id}*"),
                _ => id.clone(),
            })
            .collect();
        cols.push(NO_ENH.into());
        let ids: Vec<String> = fronts.keys().cloned().chain([NO_ENH.to_string()]).collect();
        let mut s = String::from("WER (%), one synthetic symbol per word; * marks front-ends unseen in training.\n\n");
        s.push_str("| system |");
        for b in &bands {
            for c in &cols {
                let _ = write!(s, " {} {} |", b.label(), c);
            }
        }
        s.push_str("\n|---|");
        for _ in 0..bands.len() * cols.len() {
            s.push_str("---|");
        }
        s.push('\n');
        for sys in self.systems() {
            let _ = write!(s, "| {sys} |");
            for b in &bands {
                for id in &ids {
                    match self.cell(&sys, id, *b).and_then(EvalCell::wer) {
                        Some(w) => {
                            let _ = write!(s, " {:.1} |", 100.0 * w);
                        }
                        None => s.push_str(" - |"),
                    }
                }
            }
            s.push('\n');
        }
        s
    }
}

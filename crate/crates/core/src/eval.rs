//! Perplexity under the three evaluation conditions, decoder-row neighbor
//! analysis and beam-search sampling.

use std::fmt::Write as _;

use crate::data::vocab::{Vocabulary, BOS, EOS, NUM_SPECIALS};
use crate::error::{Error, Result};
use crate::lm::{DecoderParams, Model, NllSum, SequenceBatch};
use crate::tensor::Real;

/// Train/evaluate condition code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Condition {
    /// Text-only model on text.
    LL,
    /// Fused model with the stored contexts.
    LvLv,
    /// Fused model with every context replaced by the zero vector.
    LvL,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::LL, Condition::LvLv, Condition::LvL];

    pub fn code(self) -> &'static str {
        match self {
            Condition::LL => "L-L",
            Condition::LvLv => "LV-LV",
            Condition::LvL => "LV-L",
        }
    }

    /// Whether this condition applies to a fused (`true`) or text-only model.
    pub fn needs_fusion(self) -> bool {
        self != Condition::LL
    }

    fn check<T: Real>(self, model: &Model<T>) -> Result<()> {
        let fused = model.is_fused();
        if self.needs_fusion() != fused {
            let kind = if fused { "multi-modal" } else { "text-only" };
            return Err(Error::Usage(format!("condition {} does not apply to a {kind} model", self.code())));
        }
        Ok(())
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.code())
    }
}

impl std::str::FromStr for Condition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "L-L" | "LL" => Ok(Condition::LL),
            "LV-LV" | "LVLV" => Ok(Condition::LvLv),
            "LV-L" | "LVL" => Ok(Condition::LvL),
            _ => Err(Error::Usage(format!("unknown condition `{s}` (expected L-L, LV-LV or LV-L)"))),
        }
    }
}

/// Summed NLL of `batches` under `condition`.
///
/// L-L drops any contexts the batches carry, LV-L replaces them with null
/// vectors and LV-LV requires them.
pub fn batches_nll<T: Real>(
    model: &Model<T>,
    batches: impl IntoIterator<Item = SequenceBatch>,
    condition: Condition,
) -> Result<NllSum> {
    condition.check(model)?;
    let mut total = NllSum { loss: 0.0, tokens: 0 };
    for batch in batches {
        let batch = match condition {
            Condition::LL => batch.without_contexts(),
            Condition::LvL => batch.with_null_contexts(),
            Condition::LvLv => {
                if batch.contexts.is_none() {
                    return Err(Error::Usage("LV-LV evaluation needs context vectors".into()));
                }
                batch
            }
        };
        total += model.sequence_nll(&batch)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub nll: f64,
    pub ppl: f64,
    pub tokens: usize,
}

/// Per-token mean NLL and its perplexity.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    batches: impl IntoIterator<Item = SequenceBatch>,
    condition: Condition,
) -> Result<Evaluation> {
    let sum = batches_nll(model, batches, condition)?;
    if sum.is_empty() {
        return Err(Error::Data("evaluation set has no target tokens".into()));
    }
    let nll = sum.per_token();
    Ok(Evaluation {
        nll,
        ppl: nll.exp(),
        tokens: sum.tokens,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub model: String,
    pub condition: Condition,
    pub language: String,
    pub nll: f64,
    pub ppl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Decimal places in both renderings.
    pub precision: usize,
}

pub const EVAL_CSV_HEADER: &str = "model,condition,language,nll,ppl";

impl EvalReport {
    pub fn new(precision: usize) -> Self {
        EvalReport {
            rows: Vec::new(),
            precision,
        }
    }

    pub fn push(&mut self, model: &str, condition: Condition, language: &str, eval: Evaluation) {
        self.rows.push(EvalRow {
            model: model.to_string(),
            condition,
            language: language.to_string(),
            nll: eval.nll,
            ppl: eval.ppl,
        });
    }

    fn num(&self, v: f64) -> String {
        format!("{v:.*}", self.precision)
    }

    /// Aligned table: `Model (Type)  Language  Test-NLL  Test-PPL`.
    pub fn to_text(&self) -> String {
        let labels: Vec<String> = self.rows.iter().map(|r| format!("{} ({})", r.model, r.condition)).collect();
        let lw = labels.iter().map(String::len).chain(["Model (Type)".len()]).max().unwrap_or(0);
        let gw = self.rows.iter().map(|r| r.language.len()).chain(["Language".len()]).max().unwrap_or(0);
        let nums: Vec<(String, String)> = self.rows.iter().map(|r| (self.num(r.nll), self.num(r.ppl))).collect();
        let nw = nums.iter().map(|n| n.0.len()).chain(["Test-NLL".len()]).max().unwrap_or(0);
        let pw = nums.iter().map(|n| n.1.len()).chain(["Test-PPL".len()]).max().unwrap_or(0);
        let mut out = String::new();
        let _ = writeln!(out, "{:<lw$}  {:<gw$}  {:>nw$}  {:>pw$}", "Model (Type)", "Language", "Test-NLL", "Test-PPL");
        for ((label, row), (nll, ppl)) in labels.iter().zip(&self.rows).zip(&nums) {
            let _ = writeln!(out, "{label:<lw$}  {:<gw$}  {nll:>nw$}  {ppl:>pw$}", row.language);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{EVAL_CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                csv_field(&r.model),
                r.condition,
                csv_field(&r.language),
                self.num(r.nll),
                self.num(r.ppl)
            );
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborReport {
    pub query: String,
    /// `(word, cosine)` by decreasing cosine.
    pub neighbors: Vec<(String, f64)>,
}

pub const NEIGHBOR_CSV_HEADER: &str = "query,rank,word,cosine";

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// The `k` non-special words whose decoder rows are closest in cosine to
/// the query's row. Ties go to the smaller vocabulary id.
pub fn nearest_neighbors<T: Real>(
    decoder: &DecoderParams<T>,
    query: &str,
    vocab: &Vocabulary,
    k: usize,
) -> Result<NeighborReport> {
    let q = vocab
        .id(query)
        .filter(|&id| !Vocabulary::is_special(id))
        .ok_or_else(|| Error::Lookup(format!("query word `{query}` is not in the vocabulary")))?;
    if decoder.u.rows() != vocab.len() {
        return Err(Error::dim("nearest_neighbors", decoder.u.shape(), (vocab.len(), decoder.u.cols())));
    }
    let row = |id: usize| -> Vec<f64> { decoder.u.row(id).iter().map(|v| v.to_f64_lossless()).collect() };
    let qv = row(q);
    let mut scored: Vec<(usize, f64)> = (NUM_SPECIALS..vocab.len())
        .filter(|&id| id != q)
        .map(|id| (id, cosine(&qv, &row(id))))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(NeighborReport {
        query: query.to_string(),
        neighbors: scored
            .into_iter()
            .map(|(id, c)| (vocab.token(id).unwrap_or_default().to_string(), c))
            .collect(),
    })
}

/// One block per query: the query, then `word  cosine` rows.
pub fn render_neighbors_text(reports: &[NeighborReport]) -> String {
    let mut out = String::new();
    for (i, r) in reports.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "{}", r.query);
        let w = r.neighbors.iter().map(|(w, _)| w.len()).max().unwrap_or(0);
        for (word, c) in &r.neighbors {
            let _ = writeln!(out, "  {word:<w$}  {c:.4}");
        }
    }
    out
}

pub fn render_neighbors_csv(reports: &[NeighborReport]) -> String {
    let mut out = format!("{NEIGHBOR_CSV_HEADER}\n");
    for r in reports {
        for (rank, (word, c)) in r.neighbors.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{c}", csv_field(&r.query), rank + 1, csv_field(word));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamConfig {
    pub width: usize,
    /// Generated tokens per hypothesis, counting the closing EOS.
    pub max_len: usize,
    /// Rank by mean log probability per generated token instead of the sum.
    pub length_normalize: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            width: 13,
            max_len: 49,
            length_normalize: false,
        }
    }
}

/// A completed hypothesis. `tokens` excludes BOS and the closing EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

impl Hypothesis {
    fn score(&self, normalize: bool) -> f64 {
        if normalize {
            self.log_prob / (self.tokens.len() + 1) as f64
        } else {
            self.log_prob
        }
    }
}

fn rank(a: &Hypothesis, b: &Hypothesis, normalize: bool) -> std::cmp::Ordering {
    b.score(normalize)
        .total_cmp(&a.score(normalize))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Length-bounded beam search from BOS.
///
/// Each step keeps the `width` best expansions across all live hypotheses;
/// an expansion by EOS completes. Only EOS may be chosen at step `max_len`.
/// Candidate tokens are EOS and non-special words. Returns up to `width`
/// completed hypotheses, best first.
pub fn beam_search<T: Real>(model: &Model<T>, context: Option<&[f32]>, config: &BeamConfig) -> Result<Vec<Hypothesis>> {
    if config.width == 0 || config.max_len == 0 {
        return Err(Error::Config("beam width and max length must be at least 1".into()));
    }
    if context.is_some() && !model.is_fused() {
        return Err(Error::Usage("a text-only model cannot take a context vector".into()));
    }
    let ctx = model.project_context(context)?;
    let vocab = model.vocab_size();
    let (states, logp) = model.decode_step(&[model.initial_state()], &[BOS], ctx.as_ref())?;
    let mut live = vec![(Hypothesis { tokens: vec![], log_prob: 0.0 }, states.into_iter().next().expect("one state"))];
    let mut live_logp = logp;
    let mut finished: Vec<Hypothesis> = Vec::new();

    for step in 1..=config.max_len {
        let last = step == config.max_len;
        let mut candidates: Vec<(usize, usize, Hypothesis)> = Vec::new();
        for (i, (hyp, _)) in live.iter().enumerate() {
            let row = live_logp.row(i);
            let choices = std::iter::once(EOS).chain(if last { NUM_SPECIALS..NUM_SPECIALS } else { NUM_SPECIALS..vocab });
            for tok in choices {
                let mut tokens = hyp.tokens.clone();
                if tok != EOS {
                    tokens.push(tok);
                }
                candidates.push((
                    i,
                    tok,
                    Hypothesis {
                        tokens,
                        log_prob: hyp.log_prob + row[tok].to_f64_lossless(),
                    },
                ));
            }
        }
        candidates.sort_by(|a, b| rank(&a.2, &b.2, config.length_normalize).then(a.1.cmp(&b.1)));
        candidates.truncate(config.width);

        let mut next_hyps = Vec::new();
        let mut parents = Vec::new();
        let mut tokens = Vec::new();
        for (parent, tok, hyp) in candidates {
            if tok == EOS {
                finished.push(hyp);
            } else {
                parents.push(live[parent].1.clone());
                tokens.push(tok);
                next_hyps.push(hyp);
            }
        }
        if next_hyps.is_empty() {
            break;
        }
        // Without length normalization, scores only fall; stop once no live
        // hypothesis can enter the final list.
        if !config.length_normalize && finished.len() >= config.width {
            finished.sort_by(|a, b| rank(a, b, false));
            finished.truncate(config.width);
            let worst = finished.last().map_or(f64::NEG_INFINITY, |h| h.log_prob);
            if next_hyps.iter().all(|h| h.log_prob < worst) {
                break;
            }
        }
        let (states, logp) = model.decode_step(&parents, &tokens, ctx.as_ref())?;
        live = next_hyps.into_iter().zip(states).collect();
        live_logp = logp;
    }
    finished.sort_by(|a, b| rank(a, b, config.length_normalize));
    finished.truncate(config.width);
    Ok(finished)
}

/// Rendering of a hypothesis that closes immediately after BOS.
pub const EMPTY_CAPTION: &str = "<empty>";

/// One block per sample: a header line, then `log_prob  sentence` rows.
pub fn render_samples(blocks: &[(String, Vec<Hypothesis>)], vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for (i, (label, hyps)) in blocks.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "{label}");
        for h in hyps {
            let text = if h.tokens.is_empty() { EMPTY_CAPTION.to_string() } else { vocab.decode(&h.tokens).join(" ") };
            let _ = writeln!(out, "  {:>10.4}  {text}", h.log_prob);
        }
    }
    out
}

//! Prompt-as-prefix: window statistics, template rendering, tokenization and
//! prompt embeddings.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result, Tensor};

pub const DEFAULT_TEMPLATE: &str = include_str!("../assets/default_prompt.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trend {
    Upward,
    Downward,
    Steady,
}

impl fmt::Display for Trend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Trend::Upward => "upward",
            Trend::Downward => "downward",
            Trend::Steady => "steady",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub min_value: f64,
    pub max_value: f64,
    pub median_value: f64,
    pub trend_sum: f64,
    pub trend_label: Trend,
    pub top_lags: Vec<usize>,
}

const TOP_LAGS: usize = 5;

/// Mean-centered autocorrelation normalized by lag 0, for lags `1..T`.
/// `None` when the window has zero variance.
pub fn autocorrelation(window: &[f64]) -> Option<Vec<f64>> {
    let n = window.len();
    let mean = window.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = window.iter().map(|x| x - mean).collect();
    let c0: f64 = centered.iter().map(|x| x * x).sum();
    if c0 == 0.0 {
        return None;
    }
    Some(
        (1..n)
            .map(|lag| centered[..n - lag].iter().zip(&centered[lag..]).map(|(a, b)| a * b).sum::<f64>() / c0)
            .collect(),
    )
}

pub fn compute_stats(window: &[f64]) -> Result<WindowStats> {
    if window.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "window statistics need at least 2 values, got {}",
            window.len()
        )));
    }
    let min_value = window.iter().copied().fold(f64::INFINITY, f64::min);
    let max_value = window.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sorted = window.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median_value = if sorted.len().is_multiple_of(2) {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    } else {
        sorted[mid]
    };

    // The sum of consecutive differences telescopes to last - first.
    let trend_sum = window[window.len() - 1] - window[0];
    let trend_label = if trend_sum > 0.0 {
        Trend::Upward
    } else if trend_sum < 0.0 {
        Trend::Downward
    } else {
        Trend::Steady
    };

    let top_lags = match autocorrelation(window) {
        None => (1..=TOP_LAGS).collect(),
        Some(acf) => {
            // Quantize so near-equal correlations tie and fall back to the
            // smaller lag, independent of rounding noise from centering.
            let mut ranked: Vec<(i64, usize)> = acf
                .iter()
                .enumerate()
                .map(|(i, r)| ((r * 1e10).round() as i64, i + 1))
                .collect();
            ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            ranked.into_iter().take(TOP_LAGS).map(|(_, lag)| lag).collect()
        }
    };

    Ok(WindowStats {
        min_value,
        max_value,
        median_value,
        trend_sum,
        trend_label,
        top_lags,
    })
}

/// Formats with four significant digits; fixed notation for moderate
/// magnitudes, scientific otherwise.
pub fn format_sig4(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.3e}");
    let exp: i32 = sci.split('e').nth(1).and_then(|e| e.parse().ok()).unwrap_or(0);
    if (-4..=3).contains(&exp) {
        let decimals = (3 - exp).max(0) as usize;
        format!("{x:.decimals$}")
    } else {
        sci
    }
}

/// Which prompt components to drop.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptAblations {
    pub no_dataset_ctx: bool,
    pub no_instruction: bool,
    pub no_stats: bool,
}

/// One template line per component.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub context: String,
    pub instruction: String,
    pub statistics: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATE).expect("bundled template is valid")
    }
}

const PLACEHOLDERS: [&str; 8] = ["context", "T", "H", "min", "max", "median", "trend", "lags"];

impl PromptTemplate {
    /// Three non-comment lines: context, instruction, statistics.
    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
            .collect();
        let [context, instruction, statistics] = lines[..] else {
            return Err(Error::Template(format!(
                "expected 3 component lines (context, instruction, statistics), found {}",
                lines.len()
            )));
        };
        let t = Self {
            context: context.to_string(),
            instruction: instruction.to_string(),
            statistics: statistics.to_string(),
        };
        for line in [&t.context, &t.instruction, &t.statistics] {
            substitute(line, |_| Some(String::new()))?;
        }
        Ok(t)
    }
}

fn substitute(line: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String> {
    let mut out = String::with_capacity(line.len());
    let mut rest = line;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after
            .find('}')
            .ok_or_else(|| Error::Template(format!("unclosed placeholder in `{line}`")))?;
        let name = &after[..close];
        if !PLACEHOLDERS.contains(&name) {
            return Err(Error::Template(format!("unknown placeholder `{{{name}}}`")));
        }
        let value = lookup(name).ok_or_else(|| Error::Template(format!("unresolved placeholder `{{{name}}}`")))?;
        out.push_str(&value);
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Renders the enabled components, in order, joined by single spaces.
pub fn render_prompt(
    dataset_context: &str,
    template: &PromptTemplate,
    lookback: usize,
    horizon: usize,
    stats: &WindowStats,
    ablations: PromptAblations,
) -> Result<String> {
    let lags = stats.top_lags.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(", ");
    let lookup = |name: &str| -> Option<String> {
        Some(match name {
            "context" => dataset_context.to_string(),
            "T" => lookback.to_string(),
            "H" => horizon.to_string(),
            "min" => format_sig4(stats.min_value),
            "max" => format_sig4(stats.max_value),
            "median" => format_sig4(stats.median_value),
            "trend" => stats.trend_label.to_string(),
            "lags" => format!("[{lags}]"),
            _ => return None,
        })
    };
    let parts = [
        (ablations.no_dataset_ctx, &template.context),
        (ablations.no_instruction, &template.instruction),
        (ablations.no_stats, &template.statistics),
    ];
    let mut rendered = Vec::new();
    for (dropped, line) in parts {
        let text = substitute(line, lookup)?;
        if !dropped {
            rendered.push(text);
        }
    }
    Ok(rendered.join(" "))
}

/// Token strings with greedy longest-match tokenization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<Vec<u8>>,
    index: HashMap<Vec<u8>, u32>,
    pad_id: u32,
    unk_id: u32,
    max_token_len: usize,
}

const PAD_MARK: &str = "<pad>";
const UNK_MARK: &str = "<unk>";

impl Vocabulary {
    /// One token per byte value; id equals the byte. Pad is `0x00`, unknown
    /// is `0x1A` (ASCII SUB). Every input tokenizes without unknowns.
    pub fn byte_level() -> Self {
        let tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        Self::build(tokens, Some(0), Some(0x1A), &[]).expect("byte vocabulary is valid")
    }

    fn build(tokens: Vec<Vec<u8>>, pad: Option<u32>, unk: Option<u32>, reserved: &[u32]) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if reserved.contains(&(i as u32)) {
                continue;
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::config(format!("duplicate vocabulary token {:?}", escape_token(t))));
            }
        }
        let single = |b: u8| index.get(&vec![b]).copied();
        let pad_id = pad.or_else(|| single(0)).ok_or_else(|| Error::config("vocabulary has no pad token"))?;
        let unk_id = unk.or_else(|| single(0x1A)).ok_or_else(|| Error::config("vocabulary has no unknown token"))?;
        let max_token_len = tokens.iter().map(Vec::len).max().unwrap_or(1);
        Ok(Self {
            tokens,
            index,
            pad_id,
            unk_id,
            max_token_len,
        })
    }

    /// One token per line with `\\`, `\n`, `\t`, `\r` and `\xNN` escapes.
    /// The literal lines `<pad>` and `<unk>` reserve those ids.
    pub fn parse(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        let (mut pad, mut unk) = (None, None);
        let mut reserved = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let id = tokens.len() as u32;
            match line {
                PAD_MARK => {
                    pad = Some(id);
                    reserved.push(id);
                    tokens.push(PAD_MARK.as_bytes().to_vec());
                }
                UNK_MARK => {
                    unk = Some(id);
                    reserved.push(id);
                    tokens.push(UNK_MARK.as_bytes().to_vec());
                }
                _ => {
                    let t = unescape_token(line)
                        .map_err(|e| Error::config(format!("vocabulary line {}: {e}", lineno + 1)))?;
                    tokens.push(t);
                }
            }
        }
        Self::build(tokens, pad, unk, &reserved)
    }

    pub fn to_file_text(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            let id = i as u32;
            let reserved = self.is_reserved(id);
            if reserved && id == self.pad_id {
                out.push_str(PAD_MARK);
            } else if reserved && id == self.unk_id {
                out.push_str(UNK_MARK);
            } else {
                out.push_str(&escape_token(t));
            }
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad_id(&self) -> u32 {
        self.pad_id
    }

    pub fn unk_id(&self) -> u32 {
        self.unk_id
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let bytes = text.as_bytes();
        let mut ids = Vec::new();
        let mut i = 0;
        while i < bytes.len() {
            let longest = self.max_token_len.min(bytes.len() - i);
            let hit = (1..=longest)
                .rev()
                .find_map(|len| self.index.get(&bytes[i..i + len]).map(|&id| (id, len)));
            match hit {
                Some((id, len)) => {
                    ids.push(id);
                    i += len;
                }
                None => {
                    ids.push(self.unk_id);
                    i += 1;
                }
            }
        }
        ids
    }

    fn is_reserved(&self, id: u32) -> bool {
        self.tokens
            .get(id as usize)
            .is_some_and(|t| self.index.get(t) != Some(&id))
    }

    /// Concatenated token bytes, lossily decoded. Reserved ids emit nothing.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let bytes: Vec<u8> = ids
            .iter()
            .filter(|&&id| !self.is_reserved(id))
            .filter_map(|&id| self.tokens.get(id as usize))
            .flatten()
            .copied()
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

fn escape_token(t: &[u8]) -> String {
    let mut s = String::new();
    for &b in t {
        match b {
            b'\\' => s.push_str("\\\\"),
            b'\n' => s.push_str("\\n"),
            b'\t' => s.push_str("\\t"),
            b'\r' => s.push_str("\\r"),
            0x21..=0x7E => s.push(b as char),
            _ => s.push_str(&format!("\\x{b:02x}")),
        }
    }
    s
}

fn unescape_token(line: &str) -> std::result::Result<Vec<u8>, String> {
    let mut out = Vec::new();
    let mut bytes = line.bytes();
    while let Some(b) = bytes.next() {
        if b != b'\\' {
            out.push(b);
            continue;
        }
        match bytes.next() {
            Some(b'\\') => out.push(b'\\'),
            Some(b'n') => out.push(b'\n'),
            Some(b't') => out.push(b'\t'),
            Some(b'r') => out.push(b'\r'),
            Some(b'x') => {
                let hex: Vec<u8> = bytes.by_ref().take(2).collect();
                let s = std::str::from_utf8(&hex).map_err(|_| "bad \\x escape".to_string())?;
                out.push(u8::from_str_radix(s, 16).map_err(|_| format!("bad \\x escape `{s}`"))?);
            }
            other => return Err(format!("unknown escape {:?}", other.map(char::from))),
        }
    }
    if out.is_empty() {
        return Err("empty token".to_string());
    }
    Ok(out)
}

/// Looks up prompt token rows in the word-embedding matrix `[V×D]`.
pub fn embed_prompt(embeddings: &Tensor, token_ids: &[u32]) -> Result<Tensor> {
    let (v, d) = embeddings.dims2()?;
    let mut data = Vec::with_capacity(token_ids.len() * d);
    for &id in token_ids {
        if id as usize >= v {
            return Err(Error::contract(format!("token id {id} out of range for vocabulary of {v}")));
        }
        data.extend_from_slice(embeddings.row(id as usize));
    }
    Tensor::new(vec![token_ids.len(), d], data)
}

/// Everything that went into one window's prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptContext {
    pub dataset_context: String,
    pub task_instruction: String,
    pub stats: WindowStats,
    pub rendered: String,
    pub token_ids: Vec<u32>,
}

#[allow(clippy::too_many_arguments)]
pub fn build_prompt(
    vocab: &Vocabulary,
    template: &PromptTemplate,
    dataset_context: &str,
    lookback: usize,
    horizon: usize,
    window: &[f64],
    ablations: PromptAblations,
    max_prompt_len: usize,
) -> Result<PromptContext> {
    let stats = compute_stats(window)?;
    let rendered = render_prompt(dataset_context, template, lookback, horizon, &stats, ablations)?;
    let instruction_only = PromptAblations {
        no_dataset_ctx: true,
        no_instruction: false,
        no_stats: true,
    };
    let task_instruction = render_prompt(dataset_context, template, lookback, horizon, &stats, instruction_only)?;
    let token_ids = vocab.tokenize(&rendered);
    if token_ids.len() > max_prompt_len {
        return Err(Error::config(format!(
            "prompt has {} tokens, limit is {max_prompt_len}",
            token_ids.len()
        )));
    }
    Ok(PromptContext {
        dataset_context: dataset_context.to_string(),
        task_instruction,
        stats,
        rendered,
        token_ids,
    })
}

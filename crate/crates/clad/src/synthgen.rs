//! Seeded synthetic log corpora with injectable anomalies.
//!
//! Normal traffic renders from a fixed pool of twenty templates with small
//! variable domains (zero-padded integers, short hex tokens, tiny enums), so
//! windows compress into a handful of literal records plus cheap deltas.
//! Anomalies are injected at three scales, mirroring how real incidents
//! disturb a compressed stream:
//!
//! * **novel-keyword** — one entry becomes a line full of never-seen tokens;
//! * **malformed-variable** — one slot value is replaced by an out-of-domain
//!   string longer than any legal value;
//! * **burst** — a contiguous run of 5–15 entries becomes novel lines.
//!
//! Everything derives from `(seed, window index)`, so corpora are
//! byte-identical across runs, and each window can be regenerated in
//! isolation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::compressor::{LogEntry, LogWindow};
use crate::error::{Error, Result};
use crate::ingest::LabeledSequenceSet;
use crate::seeding::derive_rng;

/// One variable slot's value domain.
#[derive(Debug, Clone)]
pub enum SlotKind {
    /// Decimal integer in `lo..=hi`, rendered zero-padded to `hi`'s width so
    /// every render of a template has the same length.
    Int { lo: u32, hi: u32 },
    /// Fixed-width lowercase hex token.
    Hex { digits: usize },
    /// A small closed vocabulary; options must share one length.
    Choice(&'static [&'static str]),
}

impl SlotKind {
    fn render(&self, rng: &mut ChaCha20Rng) -> String {
        match self {
            SlotKind::Int { lo, hi } => {
                let width = hi.to_string().len();
                format!("{:0width$}", rng.random_range(*lo..=*hi), width = width)
            }
            SlotKind::Hex { digits } => {
                let mut s = String::with_capacity(*digits);
                for _ in 0..*digits {
                    s.push(char::from_digit(rng.random_range(0..16), 16).unwrap());
                }
                s
            }
            SlotKind::Choice(options) => options[rng.random_range(0..options.len())].to_string(),
        }
    }

    /// Widest legal render, bounding what malformed replacements must exceed.
    fn max_width(&self) -> usize {
        match self {
            SlotKind::Int { hi, .. } => hi.to_string().len(),
            SlotKind::Hex { digits } => *digits,
            SlotKind::Choice(options) => options.iter().map(|o| o.len()).max().unwrap_or(0),
        }
    }
}

/// A log line shape: literal text interleaved with variable slots.
///
/// `literals` has one more element than `slots`; the rendered line is
/// `literals[0] slots[0] literals[1] … slots[n-1] literals[n]`.
#[derive(Debug, Clone)]
pub struct TemplateSpec {
    literals: Vec<&'static str>,
    slots: Vec<SlotKind>,
}

impl TemplateSpec {
    /// Split `text` on `{}` placeholders and pair the gaps with `slots`.
    pub fn new(text: &'static str, slots: Vec<SlotKind>) -> Self {
        let literals: Vec<&'static str> = text.split("{}").collect();
        assert_eq!(
            literals.len(),
            slots.len() + 1,
            "template {:?} has {} placeholders but {} slots",
            text,
            literals.len() - 1,
            slots.len()
        );
        TemplateSpec { literals, slots }
    }

    /// Render a line with uniformly drawn slot values.
    pub fn render(&self, rng: &mut ChaCha20Rng) -> Vec<u8> {
        let mut line = String::new();
        for (i, lit) in self.literals.iter().enumerate() {
            line.push_str(lit);
            if let Some(slot) = self.slots.get(i) {
                line.push_str(&slot.render(rng));
            }
        }
        line.into_bytes()
    }

    /// Recover the slot value spans of a line rendered from this template.
    ///
    /// Walks the literal anchors left to right; returns `None` when any
    /// anchor is missing, so it can probe which template produced a line.
    pub fn parse(&self, payload: &[u8]) -> Option<Vec<(usize, usize)>> {
        let mut spans = Vec::with_capacity(self.slots.len());
        let first = self.literals[0].as_bytes();
        if !payload.starts_with(first) {
            return None;
        }
        let mut pos = first.len();
        for lit in &self.literals[1..] {
            let lit = lit.as_bytes();
            let end = if lit.is_empty() {
                payload.len()
            } else {
                pos + find(&payload[pos..], lit)?
            };
            spans.push((pos, end));
            pos = end + lit.len();
        }
        (pos == payload.len()).then_some(spans)
    }
}

fn find(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

/// The fixed default pool of twenty templates.
pub fn default_templates() -> Vec<TemplateSpec> {
    use SlotKind::{Choice, Hex, Int};
    vec![
        TemplateSpec::new("kern: page scan pass {} done in {} ms", vec![Int { lo: 1, hi: 40 }, Int { lo: 2, hi: 99 }]),
        TemplateSpec::new("kern: cpu {} temp {} C ok", vec![Int { lo: 0, hi: 7 }, Int { lo: 35, hi: 70 }]),
        TemplateSpec::new("sched: task {} moved to core {}", vec![Hex { digits: 3 }, Int { lo: 0, hi: 7 }]),
        TemplateSpec::new("netd: link eth{} up at {} mbps", vec![Int { lo: 0, hi: 3 }, Choice(&["0100", "1000", "2500"])]),
        TemplateSpec::new("netd: arp sweep freed {} rows", vec![Int { lo: 0, hi: 99 }]),
        TemplateSpec::new("fsd: journal commit seq {} ok", vec![Hex { digits: 4 }]),
        TemplateSpec::new("fsd: inode scan bucket {} clean", vec![Int { lo: 0, hi: 255 }]),
        TemplateSpec::new("authd: session {} open for uid {}", vec![Hex { digits: 4 }, Int { lo: 0, hi: 99 }]),
        TemplateSpec::new("authd: token refresh ok uid {}", vec![Int { lo: 0, hi: 99 }]),
        TemplateSpec::new("cache: evicted {} pages tier {}", vec![Int { lo: 0, hi: 500 }, Choice(&["hot", "wrm", "cld"])]),
        TemplateSpec::new("rpc: call {} node{} took {} us", vec![Hex { digits: 3 }, Int { lo: 1, hi: 8 }, Int { lo: 10, hi: 9999 }]),
        TemplateSpec::new("sensor: fan {} speed {} rpm", vec![Int { lo: 0, hi: 3 }, Int { lo: 1200, hi: 4800 }]),
        TemplateSpec::new("kern: irq {} moved to core {}", vec![Int { lo: 1, hi: 64 }, Int { lo: 0, hi: 7 }]),
        TemplateSpec::new("sched: queue depth {} in budget", vec![Int { lo: 0, hi: 64 }]),
        TemplateSpec::new("netd: dns lookup {} from cache", vec![Hex { digits: 4 }]),
        TemplateSpec::new("fsd: block remap lba {} ok", vec![Hex { digits: 5 }]),
        TemplateSpec::new("authd: key rotation epoch {} ok", vec![Int { lo: 1, hi: 200 }]),
        TemplateSpec::new("cache: tier {} hit rate {} pct", vec![Choice(&["l1", "l2", "l3"]), Int { lo: 50, hi: 99 }]),
        TemplateSpec::new("rpc: heartbeat node{} rtt {} us", vec![Int { lo: 1, hi: 8 }, Int { lo: 50, hi: 900 }]),
        TemplateSpec::new("sensor: rail {} reads {} mv", vec![Choice(&["3v3", "5v0", "12v"]), Int { lo: 3100, hi: 12400 }]),
    ]
}

/// The three anomaly manifestation scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnomalyKind {
    NovelKeyword,
    MalformedVariable,
    Burst,
}

impl AnomalyKind {
    /// Marker tag written to the corpus sidecar for modified entries.
    pub fn marker(self) -> &'static str {
        match self {
            AnomalyKind::NovelKeyword => "NOVEL",
            AnomalyKind::MalformedVariable => "MALVAR",
            AnomalyKind::Burst => "BURST",
        }
    }

    /// Every supported anomaly kind.
    pub fn all() -> [AnomalyKind; 3] {
        [AnomalyKind::NovelKeyword, AnomalyKind::MalformedVariable, AnomalyKind::Burst]
    }
}

/// Burst length bounds (clipped to the window size for tiny windows).
const BURST_MIN: usize = 5;
const BURST_MAX: usize = 15;

/// Characters novel tokens draw from: disjoint from template vocabulary.
const NOVEL_ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
/// Characters used for out-of-domain slot values.
const MALFORMED_ALPHABET: &[u8] = b"!?#$%^&*~=+ABCDEFGHJKMNPQRSTUVWXYZ";

fn novel_token(rng: &mut ChaCha20Rng) -> String {
    let len = rng.random_range(8..=12);
    (0..len).map(|_| NOVEL_ALPHABET[rng.random_range(0..NOVEL_ALPHABET.len())] as char).collect()
}

fn novel_line(rng: &mut ChaCha20Rng) -> Vec<u8> {
    let head = ["PANIC", "FATAL", "OOPS"][rng.random_range(0..3)];
    format!("{} {} UNRECOVERABLE {}", head, novel_token(rng), novel_token(rng)).into_bytes()
}

fn malformed_value(rng: &mut ChaCha20Rng, min_len: usize) -> String {
    let len = rng.random_range(min_len.max(10)..=min_len.max(10) + 6);
    (0..len)
        .map(|_| MALFORMED_ALPHABET[rng.random_range(0..MALFORMED_ALPHABET.len())] as char)
        .collect()
}

/// Parameters of one synthetic corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusParams {
    pub seed: u64,
    pub n_windows: usize,
    #[serde(default = "default_window_size")]
    pub window_size: usize,
    pub anomaly_ratio: f64,
    #[serde(default = "default_kinds")]
    pub kinds: Vec<AnomalyKind>,
}

fn default_window_size() -> usize {
    100
}

fn default_kinds() -> Vec<AnomalyKind> {
    vec![AnomalyKind::NovelKeyword, AnomalyKind::MalformedVariable, AnomalyKind::Burst]
}

/// A generated corpus: labeled windows plus the per-entry labels and anomaly
/// kinds needed to write a faithful sidecar file.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub set: LabeledSequenceSet,
    /// Per window, per entry: 0 normal, 1 modified by injection.
    pub entry_labels: Vec<Vec<u8>>,
    /// Which anomaly kind touched each window, if any.
    pub kinds_used: Vec<Option<AnomalyKind>>,
}

/// Generate a corpus of `n_windows` windows with exactly
/// `round(anomaly_ratio · n_windows)` anomalous ones.
pub fn generate_corpus(params: &CorpusParams) -> Result<SyntheticCorpus> {
    if !(0.0..=1.0).contains(&params.anomaly_ratio) {
        return Err(Error::Input(format!(
            "anomaly_ratio must lie in [0,1], got {}",
            params.anomaly_ratio
        )));
    }
    if params.n_windows == 0 || params.window_size == 0 {
        return Err(Error::Input("corpus needs n_windows ≥ 1 and window_size ≥ 1".into()));
    }
    if params.kinds.is_empty() && params.anomaly_ratio > 0.0 {
        return Err(Error::Input("anomaly_ratio > 0 needs at least one anomaly kind".into()));
    }
    let templates = default_templates();
    let n = params.n_windows;
    let w = params.window_size;

    let n_anomalous = (params.anomaly_ratio * n as f64).round() as usize;
    let mut pick_rng = derive_rng(params.seed, "anomaly-set", 0);
    let anomalous = rand::seq::index::sample(&mut pick_rng, n, n_anomalous);
    let mut is_anomalous = vec![false; n];
    for i in anomalous {
        is_anomalous[i] = true;
    }

    let mut windows = Vec::with_capacity(n);
    let mut entry_labels = Vec::with_capacity(n);
    let mut kinds_used = Vec::with_capacity(n);
    for (i, &anomalous) in is_anomalous.iter().enumerate() {
        let mut rng = derive_rng(params.seed, "window", i as u64);
        let payloads: Vec<Vec<u8>> = (0..w)
            .map(|_| templates[rng.random_range(0..templates.len())].render(&mut rng))
            .collect();
        let base = entries_from(payloads, (i * w) as u64)?;
        let window = LogWindow::new(i as u64, base, 0)?;
        if anomalous {
            let kind = params.kinds[rng.random_range(0..params.kinds.len())];
            let (injected, modified) = inject_into(&templates, &window, kind, &mut rng)?;
            let mut labels = vec![0u8; w];
            for m in &modified {
                labels[*m] = 1;
            }
            windows.push(injected);
            entry_labels.push(labels);
            kinds_used.push(Some(kind));
        } else {
            windows.push(window);
            entry_labels.push(vec![0u8; w]);
            kinds_used.push(None);
        }
    }
    Ok(SyntheticCorpus { set: LabeledSequenceSet::new(windows), entry_labels, kinds_used })
}

fn entries_from(payloads: Vec<Vec<u8>>, first_ordinal: u64) -> Result<Vec<LogEntry>> {
    payloads
        .into_iter()
        .enumerate()
        .map(|(j, p)| LogEntry::new(p, first_ordinal + j as u64))
        .collect()
}

/// Inject one anomaly of `kind` into a normal window; returns the modified
/// window (label 1) and the indices of the entries that changed.
pub fn inject_anomaly(
    templates: &[TemplateSpec],
    window: &LogWindow,
    kind: AnomalyKind,
    seed: u64,
) -> Result<(LogWindow, Vec<usize>)> {
    let mut rng = derive_rng(seed, "inject", window.window_id);
    inject_into(templates, window, kind, &mut rng)
}

fn inject_into(
    templates: &[TemplateSpec],
    window: &LogWindow,
    kind: AnomalyKind,
    rng: &mut ChaCha20Rng,
) -> Result<(LogWindow, Vec<usize>)> {
    let w = window.entries.len();
    let mut payloads: Vec<Vec<u8>> =
        window.entries.iter().map(|e| e.payload().to_vec()).collect();
    let modified: Vec<usize> = match kind {
        AnomalyKind::NovelKeyword => {
            let idx = rng.random_range(0..w);
            payloads[idx] = novel_line(rng);
            vec![idx]
        }
        AnomalyKind::MalformedVariable => {
            let idx = rng.random_range(0..w);
            payloads[idx] = malform(templates, &payloads[idx], rng)?;
            vec![idx]
        }
        AnomalyKind::Burst => {
            let len = rng.random_range(BURST_MIN.min(w)..=BURST_MAX.min(w));
            let start = rng.random_range(0..=w - len);
            for p in payloads.iter_mut().skip(start).take(len) {
                *p = novel_line(rng);
            }
            (start..start + len).collect()
        }
    };
    let ordinals: Vec<u64> = window.entries.iter().map(|e| e.ordinal()).collect();
    let entries = payloads
        .into_iter()
        .zip(ordinals)
        .map(|(p, o)| LogEntry::new(p, o))
        .collect::<Result<Vec<_>>>()?;
    let injected = LogWindow::new(window.window_id, entries, 1)?;
    Ok((injected, modified))
}

/// Replace exactly one slot value of a templated line with an out-of-domain
/// string longer than any legal value for that slot.
fn malform(templates: &[TemplateSpec], payload: &[u8], rng: &mut ChaCha20Rng) -> Result<Vec<u8>> {
    for template in templates {
        let Some(spans) = template.parse(payload) else { continue };
        if spans.is_empty() {
            continue;
        }
        let slot = rng.random_range(0..spans.len());
        let (start, end) = spans[slot];
        let replacement = malformed_value(rng, template.slots[slot].max_width() + 1);
        let mut line = Vec::with_capacity(payload.len() + replacement.len());
        line.extend_from_slice(&payload[..start]);
        line.extend_from_slice(replacement.as_bytes());
        line.extend_from_slice(&payload[end..]);
        return Ok(line);
    }
    Err(Error::Input(format!(
        "line {:?} matches no template; malformed-variable needs templated input",
        String::from_utf8_lossy(payload)
    )))
}

/// Write the corpus as an inline-prefix labeled log file: `-` marks normal
/// entries, the anomaly kind's tag marks injected ones. Windows are laid out
/// back to back, so sliding windows of the same size reproduce the corpus.
pub fn write_corpus_file(path: &Path, corpus: &SyntheticCorpus) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for (w, window) in corpus.set.windows.iter().enumerate() {
        let kind = corpus.kinds_used[w];
        for (j, entry) in window.entries.iter().enumerate() {
            let marker = if corpus.entry_labels[w][j] == 1 {
                kind.expect("modified entry implies a kind").marker()
            } else {
                "-"
            };
            out.write_all(marker.as_bytes()).map_err(|e| Error::io(path, e))?;
            out.write_all(b" ").map_err(|e| Error::io(path, e))?;
            out.write_all(entry.payload()).map_err(|e| Error::io(path, e))?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compressor::compress_window;
    use crate::ingest::{
        load_labeled_entries, sliding_windows, DatasetSpec, LabelAdapter, SplitStrategy,
        Windowing,
    };

    fn params(seed: u64, n: usize, ratio: f64) -> CorpusParams {
        CorpusParams {
            seed,
            n_windows: n,
            window_size: 100,
            anomaly_ratio: ratio,
            kinds: default_kinds(),
        }
    }

    // ---- templates ----------------------------------------------------------

    #[test]
    fn renders_have_fixed_length_per_template() {
        for template in default_templates() {
            let mut rng = derive_rng(1, "t", 0);
            let lens: Vec<usize> = (0..50).map(|_| template.render(&mut rng).len()).collect();
            assert!(lens.iter().all(|&l| l == lens[0]), "{:?}", template);
        }
    }

    #[test]
    fn parse_recovers_slot_spans() {
        let templates = default_templates();
        let mut rng = derive_rng(2, "t", 0);
        for template in &templates {
            for _ in 0..20 {
                let line = template.render(&mut rng);
                let spans = template.parse(&line).expect("own render must parse");
                assert_eq!(spans.len(), template.slots.len());
                for (i, (a, b)) in spans.iter().enumerate() {
                    assert!(a < b && *b <= line.len());
                    assert_eq!(b - a, template.slots[i].max_width());
                }
            }
        }
    }

    #[test]
    fn every_render_matches_exactly_one_parse_origin() {
        // A rendered line may parse under a cousin template only if the
        // malform step would still produce a valid anomaly; here we just pin
        // that the first match is the generator.
        let templates = default_templates();
        let mut rng = derive_rng(3, "t", 0);
        for (i, template) in templates.iter().enumerate() {
            let line = template.render(&mut rng);
            let first_match =
                templates.iter().position(|t| t.parse(&line).is_some()).unwrap();
            assert_eq!(first_match, i, "line {:?}", String::from_utf8_lossy(&line));
        }
    }

    // ---- corpus generation -------------------------------------------------

    #[test]
    fn ratio_zero_is_all_normal() {
        let corpus = generate_corpus(&params(5, 50, 0.0)).unwrap();
        assert_eq!(corpus.set.anomaly_count, 0);
        assert!(corpus.set.windows.iter().all(|w| w.label == 0));
        assert!(corpus.kinds_used.iter().all(|k| k.is_none()));
    }

    #[test]
    fn census_is_exact_at_acceptance_scale() {
        let corpus = generate_corpus(&params(11, 2000, 0.10)).unwrap();
        assert_eq!(corpus.set.windows.len(), 2000);
        assert_eq!(corpus.set.anomaly_count, 200);
        // Entry labels agree with window labels.
        for (w, labels) in corpus.set.windows.iter().zip(&corpus.entry_labels) {
            let any = labels.contains(&1);
            assert_eq!(w.label == 1, any);
        }
        // All three kinds appear in a 200-window draw.
        for kind in default_kinds() {
            assert!(corpus.kinds_used.iter().flatten().any(|k| *k == kind));
        }
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let a = generate_corpus(&params(42, 60, 0.2)).unwrap();
        let b = generate_corpus(&params(42, 60, 0.2)).unwrap();
        assert_eq!(a.set, b.set);
        assert_eq!(a.entry_labels, b.entry_labels);
        let c = generate_corpus(&params(43, 60, 0.2)).unwrap();
        assert_ne!(a.set, c.set);
    }

    // ---- injection ----------------------------------------------------------

    fn normal_window(seed: u64) -> LogWindow {
        let corpus = generate_corpus(&CorpusParams {
            seed,
            n_windows: 1,
            window_size: 100,
            anomaly_ratio: 0.0,
            kinds: vec![],
        })
        .unwrap();
        corpus.set.windows.into_iter().next().unwrap()
    }

    #[test]
    fn novel_keyword_modifies_exactly_one_entry() {
        let templates = default_templates();
        let w = normal_window(9);
        let (injected, modified) =
            inject_anomaly(&templates, &w, AnomalyKind::NovelKeyword, 1).unwrap();
        assert_eq!(injected.label, 1);
        assert_eq!(modified.len(), 1);
        let diffs: Vec<usize> = (0..100)
            .filter(|&i| injected.entries[i].payload() != w.entries[i].payload())
            .collect();
        assert_eq!(diffs, modified);
        let line = injected.entries[modified[0]].payload();
        assert!(line.windows(13).any(|s| s == b"UNRECOVERABLE"));
    }

    #[test]
    fn burst_modifies_a_contiguous_run() {
        let templates = default_templates();
        let w = normal_window(10);
        for seed in 0..20 {
            let (injected, modified) =
                inject_anomaly(&templates, &w, AnomalyKind::Burst, seed).unwrap();
            assert!((BURST_MIN..=BURST_MAX).contains(&modified.len()));
            for pair in modified.windows(2) {
                assert_eq!(pair[1], pair[0] + 1);
            }
            let diffs = (0..100)
                .filter(|&i| injected.entries[i].payload() != w.entries[i].payload())
                .count();
            assert_eq!(diffs, modified.len());
        }
    }

    #[test]
    fn malformed_variable_replaces_one_slot() {
        let templates = default_templates();
        let w = normal_window(11);
        let (injected, modified) =
            inject_anomaly(&templates, &w, AnomalyKind::MalformedVariable, 3).unwrap();
        assert_eq!(modified.len(), 1);
        let before = w.entries[modified[0]].payload();
        let after = injected.entries[modified[0]].payload();
        assert_ne!(before, after);
        assert!(after.len() > before.len(), "replacement must exceed the slot width");
        // The malformed line no longer parses under any template (the
        // replacement alphabet is out of every slot domain).
        assert!(templates.iter().all(|t| t
            .parse(after)
            .is_none_or(|spans| spans.iter().any(|(a, b)| {
                injected.entries[modified[0]].payload()[*a..*b]
                    .iter()
                    .any(|c| MALFORMED_ALPHABET.contains(c))
            }))));
    }

    #[test]
    fn injection_is_seed_deterministic() {
        let templates = default_templates();
        let w = normal_window(12);
        for kind in default_kinds() {
            let a = inject_anomaly(&templates, &w, kind, 7).unwrap();
            let b = inject_anomaly(&templates, &w, kind, 7).unwrap();
            assert_eq!(a.0, b.0);
            assert_eq!(a.1, b.1);
        }
    }

    #[test]
    fn injection_strictly_lengthens_compressed_streams() {
        let templates = default_templates();
        let kinds = default_kinds();
        let mut increased = 0;
        let total = 300;
        for i in 0..total {
            let w = normal_window(1000 + i);
            let kind = kinds[(i % 3) as usize];
            let (injected, _) = inject_anomaly(&templates, &w, kind, i).unwrap();
            let before = compress_window(&w).stream.len();
            let after = compress_window(&injected).stream.len();
            if after > before {
                increased += 1;
            }
        }
        assert!(
            increased as f64 >= 0.99 * total as f64,
            "only {}/{} injections grew the stream",
            increased,
            total
        );
    }

    // ---- file round trip ------------------------------------------------------

    #[test]
    fn corpus_file_round_trips_through_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("synth.log");
        let corpus = generate_corpus(&params(21, 40, 0.25)).unwrap();
        write_corpus_file(&path, &corpus).unwrap();

        let spec = DatasetSpec {
            name: "synth".into(),
            entry_file: path,
            label_file: None,
            label_adapter: LabelAdapter::InlinePrefix,
            windowing: Windowing::Sliding,
            window_size: 100,
            target_window_count: None,
            session_id_pattern: None,
            split: SplitStrategy::Chronological,
            train_fraction: 0.8,
            seed: 21,
        };
        let entries = load_labeled_entries(&spec).unwrap();
        assert_eq!(entries.len(), 4000);
        let set = sliding_windows(&entries, 100).unwrap();
        assert_eq!(set.len(), 40);
        assert_eq!(set.anomaly_count, corpus.set.anomaly_count);
        for (got, want) in set.windows.iter().zip(&corpus.set.windows) {
            assert_eq!(got.label, want.label);
            assert_eq!(got.payloads(), want.payloads());
        }
    }
}

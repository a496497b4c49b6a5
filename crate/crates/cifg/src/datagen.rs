//! Synthetic visually grounded corpus with known alignments.
//!
//! A concept vocabulary assigns each concept word a subword decomposition
//! (1–3 tokens, word-initial marker `▁` on the first), a base image vector,
//! and one acoustic template per token. Scenes combine 2–4 concepts into an
//! image feature (sum of bases plus noise) and 1–5 captions; each caption is
//! rendered to pseudo-speech by expanding every token into 3–8 noisy copies
//! of its template, recording the exact (token, start, end) span.
//!
//! Everything is a pure function of (seed, sizes): records are generated
//! from per-scene derived streams, so order of generation cannot matter.

use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::rng::SeedSource;

pub const MANIFEST_HEADER: &str = "CIFG-MANIFEST v1";
pub const VOCAB_HEADER: &str = "CIFG-VOCAB v1";

/// Function words bundled with the crate (the filtered-metric stop set).
pub const STOP_WORD_SOURCE: &str = include_str!("../assets/stopwords.txt");

#[derive(Debug, Clone)]
pub struct DatagenConfig {
    pub n_scenes: usize,
    pub n_concepts: usize,
    pub n_stop_tokens: usize,
    pub d_img: usize,
    pub d_acoustic: usize,
    pub sigma_img: f64,
    pub sigma_speech: f64,
    pub concepts_per_scene: (usize, usize),
    pub captions_per_scene: (usize, usize),
    pub frames_per_token: (usize, usize),
    pub stop_gap_prob: f64,
    pub split_fractions: (f64, f64, f64),
}

impl Default for DatagenConfig {
    fn default() -> Self {
        DatagenConfig {
            n_scenes: 2000,
            n_concepts: 60,
            n_stop_tokens: 8,
            d_img: 24,
            d_acoustic: 20,
            sigma_img: 0.1,
            sigma_speech: 0.3,
            concepts_per_scene: (2, 4),
            captions_per_scene: (1, 5),
            frames_per_token: (3, 8),
            stop_gap_prob: 0.5,
            split_fractions: (0.8, 0.1, 0.1),
        }
    }
}

impl DatagenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_scenes < 10 {
            return Err(Error::Data(format!(
                "n_scenes must be at least 10, got {}",
                self.n_scenes
            )));
        }
        if self.n_concepts < 2 {
            return Err(Error::Parameter("need at least 2 concepts".into()));
        }
        if self.n_stop_tokens == 0 || self.n_stop_tokens > stop_word_list().len() {
            return Err(Error::Parameter(format!(
                "n_stop_tokens must be in 1..={}",
                stop_word_list().len()
            )));
        }
        let (f1, f2, f3) = self.split_fractions;
        if (f1 + f2 + f3 - 1.0).abs() > 1e-9 || f1 <= 0.0 || f2 <= 0.0 || f3 <= 0.0 {
            return Err(Error::Parameter("split fractions must be positive and sum to 1".into()));
        }
        let ranges = [
            self.concepts_per_scene,
            self.captions_per_scene,
            self.frames_per_token,
        ];
        if ranges.iter().any(|&(lo, hi)| lo == 0 || lo > hi) {
            return Err(Error::Parameter("invalid sampling range".into()));
        }
        if !(0.0..=1.0).contains(&self.stop_gap_prob) {
            return Err(Error::Parameter("stop_gap_prob must be in [0, 1]".into()));
        }
        Ok(())
    }
}

pub fn stop_word_list() -> Vec<&'static str> {
    STOP_WORD_SOURCE.lines().filter(|l| !l.is_empty()).collect()
}

#[derive(Debug, Clone)]
pub struct TokenInfo {
    pub string: String,
    pub is_stop: bool,
    pub is_word_initial: bool,
}

#[derive(Debug, Clone)]
pub struct WordInfo {
    pub string: String,
    pub token_ids: Vec<usize>,
    pub is_stop: bool,
}

/// Concept vocabulary with per-token acoustic templates and per-word image
/// base vectors.
#[derive(Debug, Clone)]
pub struct ConceptVocab {
    pub tokens: Vec<TokenInfo>,
    pub words: Vec<WordInfo>,
    pub end_token: usize,
    pub stop_token_ids: Vec<usize>,
    /// indices into `words` of the content (concept) words
    pub concept_word_ids: Vec<usize>,
    pub acoustic_templates: Array2<f64>,
    pub image_bases: Array2<f64>,
    pub d_img: usize,
    pub d_acoustic: usize,
}

const CONSONANTS: [&str; 14] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Build the vocabulary deterministically from a seed.
///
/// Concept decompositions are prefix-unambiguous: no word's token sequence
/// is a prefix of another's, so word reconstruction from token runs is
/// well defined.
pub fn build_vocab(seed: u64, cfg: &DatagenConfig) -> Result<ConceptVocab> {
    cfg.validate()?;
    let seeds = SeedSource::new(seed);
    let mut rng = seeds.rng("vocab");

    let syllables: Vec<String> = CONSONANTS
        .iter()
        .flat_map(|c| VOWELS.iter().map(move |v| format!("{c}{v}")))
        .collect();

    let mut token_index: BTreeMap<String, usize> = BTreeMap::new();
    let mut tokens: Vec<TokenInfo> = Vec::new();
    let mut intern = |s: String, is_stop: bool, tokens: &mut Vec<TokenInfo>| -> usize {
        if let Some(&id) = token_index.get(&s) {
            return id;
        }
        let id = tokens.len();
        token_index.insert(s.clone(), id);
        tokens.push(TokenInfo {
            is_word_initial: s.starts_with('▁'),
            is_stop,
            string: s,
        });
        id
    };

    let mut words: Vec<WordInfo> = Vec::new();
    let mut word_strings: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
    let mut decomps: Vec<Vec<String>> = Vec::new();
    let stop_words = stop_word_list();

    let mut concept_word_ids = Vec::with_capacity(cfg.n_concepts);
    for _ in 0..cfg.n_concepts {
        // rejection-sample a decomposition that keeps the lexicon prefix-free
        let (word, parts) = loop {
            let len = rng.gen_range(1..=3usize);
            let parts: Vec<String> = (0..len)
                .map(|i| {
                    let syl = syllables[rng.gen_range(0..syllables.len())].clone();
                    if i == 0 {
                        format!("▁{syl}")
                    } else {
                        syl
                    }
                })
                .collect();
            let word: String = parts
                .iter()
                .map(|p| p.trim_start_matches('▁'))
                .collect::<Vec<_>>()
                .join("");
            if word_strings.contains(&word) || stop_words.contains(&word.as_str()) {
                continue;
            }
            let prefix_clash = decomps.iter().any(|d| {
                let n = d.len().min(parts.len());
                d[..n] == parts[..n]
            });
            if prefix_clash {
                continue;
            }
            break (word, parts);
        };
        let token_ids: Vec<usize> = parts
            .iter()
            .map(|p| intern(p.clone(), false, &mut tokens))
            .collect();
        decomps.push(parts);
        word_strings.insert(word.clone());
        concept_word_ids.push(words.len());
        words.push(WordInfo {
            string: word,
            token_ids,
            is_stop: false,
        });
    }

    let mut stop_token_ids = Vec::with_capacity(cfg.n_stop_tokens);
    for w in stop_words.iter().take(cfg.n_stop_tokens) {
        let id = intern(format!("▁{w}"), true, &mut tokens);
        stop_token_ids.push(id);
        words.push(WordInfo {
            string: (*w).to_string(),
            token_ids: vec![id],
            is_stop: true,
        });
    }

    let end_token = intern("</s>".to_string(), false, &mut tokens);

    let v = tokens.len();
    let mut acoustic_templates = Array2::<f64>::zeros((v, cfg.d_acoustic));
    for (id, tok) in tokens.iter().enumerate() {
        let mut trng = seeds.rng(&format!("template/{}", tok.string));
        let normal = Normal::new(0.0, 1.0).unwrap();
        for d in 0..cfg.d_acoustic {
            acoustic_templates[[id, d]] = normal.sample(&mut trng);
        }
    }
    let mut image_bases = Array2::<f64>::zeros((words.len(), cfg.d_img));
    for (wi, w) in words.iter().enumerate() {
        let mut wrng = seeds.rng(&format!("imgbase/{}", w.string));
        let normal = Normal::new(0.0, 1.0).unwrap();
        for d in 0..cfg.d_img {
            image_bases[[wi, d]] = normal.sample(&mut wrng);
        }
    }

    Ok(ConceptVocab {
        tokens,
        words,
        end_token,
        stop_token_ids,
        concept_word_ids,
        acoustic_templates,
        image_bases,
        d_img: cfg.d_img,
        d_acoustic: cfg.d_acoustic,
    })
}

#[derive(Debug, Clone)]
pub struct Caption {
    pub tokens: Vec<usize>,
    pub frames: Array2<f64>,
    /// (token_id, start, end) with half-open frame spans partitioning [0, T)
    pub alignment: Vec<(usize, usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub scene_id: u64,
    /// concept word ids (multiset, unsorted)
    pub concepts: Vec<usize>,
    pub image_feature: Array1<f64>,
    pub captions: Vec<Caption>,
}

impl Scene {
    /// Sorted concept multiset, the relatedness key.
    pub fn concept_key(&self) -> Vec<usize> {
        let mut k = self.concepts.clone();
        k.sort_unstable();
        k
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
    pub d_img: usize,
    pub d_acoustic: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// (scene index, caption index) pairs in manifest order.
    pub fn utterances(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (si, s) in self.scenes.iter().enumerate() {
            for ci in 0..s.captions.len() {
                out.push((si, ci));
            }
        }
        out
    }
}

fn generate_scene(vocab: &ConceptVocab, seeds: &SeedSource, scene_id: u64, cfg: &DatagenConfig) -> Scene {
    let mut rng = seeds.rng(&format!("scene/{scene_id}"));
    let normal = Normal::new(0.0, 1.0).unwrap();

    let n_concepts = rng.gen_range(cfg.concepts_per_scene.0..=cfg.concepts_per_scene.1);
    let concepts: Vec<usize> = (0..n_concepts)
        .map(|_| vocab.concept_word_ids[rng.gen_range(0..vocab.concept_word_ids.len())])
        .collect();

    let mut image_feature = Array1::<f64>::zeros(cfg.d_img);
    for &c in &concepts {
        image_feature += &vocab.image_bases.row(c);
    }
    for d in 0..cfg.d_img {
        image_feature[d] += cfg.sigma_img * normal.sample(&mut rng);
    }

    let n_captions = rng.gen_range(cfg.captions_per_scene.0..=cfg.captions_per_scene.1);
    let mut captions = Vec::with_capacity(n_captions);
    for _ in 0..n_captions {
        let mut order = concepts.clone();
        order.shuffle(&mut rng);
        let mut tokens: Vec<usize> = Vec::new();
        for (wi, &word) in order.iter().enumerate() {
            tokens.extend(&vocab.words[word].token_ids);
            let is_last = wi + 1 == order.len();
            if !is_last && rng.gen::<f64>() < cfg.stop_gap_prob {
                tokens.push(vocab.stop_token_ids[rng.gen_range(0..vocab.stop_token_ids.len())]);
            }
        }
        tokens.push(vocab.end_token);

        let mut alignment = Vec::with_capacity(tokens.len());
        let mut spans_frames = Vec::new();
        let mut cursor = 0usize;
        for &tok in &tokens {
            let n_frames = rng.gen_range(cfg.frames_per_token.0..=cfg.frames_per_token.1);
            alignment.push((tok, cursor, cursor + n_frames));
            for _ in 0..n_frames {
                let mut frame = vocab.acoustic_templates.row(tok).to_owned();
                for d in 0..cfg.d_acoustic {
                    frame[d] += cfg.sigma_speech * normal.sample(&mut rng);
                }
                spans_frames.push(frame);
            }
            cursor += n_frames;
        }
        let mut frames = Array2::<f64>::zeros((cursor, cfg.d_acoustic));
        for (t, f) in spans_frames.into_iter().enumerate() {
            frames.row_mut(t).assign(&f);
        }
        captions.push(Caption {
            tokens,
            frames,
            alignment,
        });
    }

    Scene {
        scene_id,
        concepts,
        image_feature,
        captions,
    }
}

/// Generate the corpus and split it by disjoint concept combinations.
pub fn generate_corpus(
    vocab: &ConceptVocab,
    seed: u64,
    cfg: &DatagenConfig,
) -> Result<(Dataset, Dataset, Dataset)> {
    cfg.validate()?;
    let seeds = SeedSource::new(seed);
    let scenes: Vec<Scene> = (0..cfg.n_scenes as u64)
        .map(|id| generate_scene(vocab, &seeds, id, cfg))
        .collect();

    // group scenes by concept combination so a combination never crosses splits
    let mut groups: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
    for (i, s) in scenes.iter().enumerate() {
        groups.entry(s.concept_key()).or_default().push(i);
    }
    let fr = cfg.split_fractions;
    let targets = [
        fr.0 * cfg.n_scenes as f64,
        fr.1 * cfg.n_scenes as f64,
        fr.2 * cfg.n_scenes as f64,
    ];
    let mut counts = [0usize; 3];
    let mut assignment: Vec<usize> = vec![0; scenes.len()];
    for (_, members) in groups.iter() {
        // largest remaining deficit takes the group
        let deficits: Vec<f64> = (0..3).map(|k| targets[k] - counts[k] as f64).collect();
        let pick = (0..3)
            .max_by(|&a, &b| deficits[a].partial_cmp(&deficits[b]).unwrap())
            .unwrap();
        for &m in members {
            assignment[m] = pick;
        }
        counts[pick] += members.len();
    }
    let mut out: [Vec<Scene>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (i, s) in scenes.into_iter().enumerate() {
        out[assignment[i]].push(s);
    }
    let mk = |scenes: Vec<Scene>| Dataset {
        scenes,
        d_img: cfg.d_img,
        d_acoustic: cfg.d_acoustic,
    };
    let [train, dev, test] = out;
    Ok((mk(train), mk(dev), mk(test)))
}

// ---- serialization ---------------------------------------------------------

/// Decimal with 17 significant digits; round-trips f64 exactly.
fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_f64_array(out: &mut String, vals: impl Iterator<Item = f64>) {
    out.push('[');
    for (i, v) in vals.enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&fmt_f64(v));
    }
    out.push(']');
}

pub fn write_manifest(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{MANIFEST_HEADER}")?;
    for s in &ds.scenes {
        let mut line = String::new();
        line.push_str(&format!("{{\"scene_id\":{},\"concepts\":[", s.scene_id));
        for (i, c) in s.concepts.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            line.push_str(&c.to_string());
        }
        line.push_str("],\"image_feature\":");
        write_f64_array(&mut line, s.image_feature.iter().copied());
        line.push_str(",\"captions\":[");
        for (ci, c) in s.captions.iter().enumerate() {
            if ci > 0 {
                line.push(',');
            }
            line.push_str("{\"tokens\":[");
            for (i, t) in c.tokens.iter().enumerate() {
                if i > 0 {
                    line.push(',');
                }
                line.push_str(&t.to_string());
            }
            line.push_str("],\"frames\":[");
            for (t, row) in c.frames.rows().into_iter().enumerate() {
                if t > 0 {
                    line.push(',');
                }
                write_f64_array(&mut line, row.iter().copied());
            }
            line.push_str("],\"alignment\":[");
            for (i, (tok, a, b)) in c.alignment.iter().enumerate() {
                if i > 0 {
                    line.push(',');
                }
                line.push_str(&format!("[{tok},{a},{b}]"));
            }
            line.push_str("]}");
        }
        line.push_str("]}");
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct RawCaption {
    tokens: Vec<usize>,
    frames: Vec<Vec<f64>>,
    alignment: Vec<(usize, usize, usize)>,
}

#[derive(Deserialize)]
struct RawScene {
    scene_id: u64,
    concepts: Vec<usize>,
    image_feature: Vec<f64>,
    captions: Vec<RawCaption>,
}

/// Stream a manifest back, validating every record's invariants.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse {
            line: 1,
            msg: "empty file (missing header)".into(),
        })?
        .map_err(Error::Io)?;
    if header != MANIFEST_HEADER {
        return Err(Error::Parse {
            line: 1,
            msg: format!("bad header {header:?}, expected {MANIFEST_HEADER:?}"),
        });
    }
    let mut scenes = Vec::new();
    let mut d_img = 0usize;
    let mut d_acoustic = 0usize;
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line.map_err(Error::Io)?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawScene = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if d_img == 0 {
            d_img = raw.image_feature.len();
        } else if raw.image_feature.len() != d_img {
            return Err(Error::Parse {
                line: line_no,
                msg: "inconsistent image feature dimension".into(),
            });
        }
        let mut captions = Vec::with_capacity(raw.captions.len());
        for c in raw.captions {
            let t = c.frames.len();
            if d_acoustic == 0 {
                d_acoustic = c.frames.first().map(|f| f.len()).unwrap_or(0);
            }
            let mut frames = Array2::<f64>::zeros((t, d_acoustic));
            for (r, row) in c.frames.iter().enumerate() {
                if row.len() != d_acoustic {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: "ragged frame row".into(),
                    });
                }
                for (j, &v) in row.iter().enumerate() {
                    frames[[r, j]] = v;
                }
            }
            // alignment spans must partition [0, T) and cover every token
            let mut cursor = 0usize;
            if c.alignment.len() != c.tokens.len() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "alignment does not cover the token sequence".into(),
                });
            }
            for ((tok, a, b), &want_tok) in c.alignment.iter().zip(c.tokens.iter()) {
                if *tok != want_tok || *a != cursor || *b <= *a {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: "alignment spans must partition the frame range".into(),
                    });
                }
                cursor = *b;
            }
            if cursor != t {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("alignment covers {cursor} frames but caption has {t}"),
                });
            }
            captions.push(Caption {
                tokens: c.tokens,
                frames,
                alignment: c.alignment,
            });
        }
        scenes.push(Scene {
            scene_id: raw.scene_id,
            concepts: raw.concepts,
            image_feature: Array1::from_vec(raw.image_feature),
            captions,
        });
    }
    Ok(Dataset {
        scenes,
        d_img,
        d_acoustic,
    })
}

// ---- vocabulary file --------------------------------------------------------

pub fn write_vocab_file(vocab: &ConceptVocab, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{VOCAB_HEADER}")?;
    writeln!(w, "#tokens {}", vocab.tokens.len())?;
    for (id, t) in vocab.tokens.iter().enumerate() {
        writeln!(
            w,
            "{id}\t{}\t{}\t{}",
            t.string,
            u8::from(t.is_stop),
            u8::from(t.is_word_initial)
        )?;
    }
    writeln!(w, "#end {}", vocab.end_token)?;
    writeln!(w, "#words {}", vocab.words.len())?;
    for word in &vocab.words {
        let ids: Vec<String> = word.token_ids.iter().map(|i| i.to_string()).collect();
        writeln!(
            w,
            "{}\t{}\t{}",
            word.string,
            ids.join(","),
            u8::from(word.is_stop)
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Token and word metadata reloaded from a vocab file. Acoustic templates
/// and image bases are not serialized; they are regenerable from the seed
/// and not needed downstream of data generation.
pub struct VocabFile {
    pub tokens: Vec<TokenInfo>,
    pub words: Vec<WordInfo>,
    pub end_token: usize,
}

pub fn load_vocab_file(path: &Path) -> Result<VocabFile> {
    let content = std::fs::read_to_string(path)?;
    let mut lines = content.lines().enumerate();
    let parse_err = |line: usize, msg: &str| Error::Parse {
        line: line + 1,
        msg: msg.to_string(),
    };
    let (i, header) = lines.next().ok_or_else(|| parse_err(0, "empty vocab file"))?;
    if header != VOCAB_HEADER {
        return Err(parse_err(i, "bad vocab header"));
    }
    let (i, count_line) = lines.next().ok_or_else(|| parse_err(1, "missing #tokens"))?;
    let n_tokens: usize = count_line
        .strip_prefix("#tokens ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| parse_err(i, "bad #tokens line"))?;
    let mut tokens = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        let (i, line) = lines.next().ok_or_else(|| parse_err(0, "truncated token table"))?;
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 4 {
            return Err(parse_err(i, "token line needs 4 fields"));
        }
        let id: usize = parts[0].parse().map_err(|_| parse_err(i, "bad token id"))?;
        if id != tokens.len() {
            return Err(parse_err(i, "token ids must be dense and ordered"));
        }
        tokens.push(TokenInfo {
            string: parts[1].to_string(),
            is_stop: parts[2] == "1",
            is_word_initial: parts[3] == "1",
        });
    }
    let (i, end_line) = lines.next().ok_or_else(|| parse_err(0, "missing #end"))?;
    let end_token: usize = end_line
        .strip_prefix("#end ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| parse_err(i, "bad #end line"))?;
    let (i, words_line) = lines.next().ok_or_else(|| parse_err(0, "missing #words"))?;
    let n_words: usize = words_line
        .strip_prefix("#words ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| parse_err(i, "bad #words line"))?;
    let mut words = Vec::with_capacity(n_words);
    for _ in 0..n_words {
        let (i, line) = lines.next().ok_or_else(|| parse_err(0, "truncated word table"))?;
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(parse_err(i, "word line needs 3 fields"));
        }
        let ids: Vec<usize> = parts[1]
            .split(',')
            .map(|s| s.parse().map_err(|_| parse_err(i, "bad word token id")))
            .collect::<Result<_>>()?;
        words.push(WordInfo {
            string: parts[0].to_string(),
            token_ids: ids,
            is_stop: parts[2] == "1",
        });
    }
    Ok(VocabFile {
        tokens,
        words,
        end_token,
    })
}

/// Write the stop-token list, one token string per line.
pub fn write_stopword_file(vocab: &ConceptVocab, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for &id in &vocab.stop_token_ids {
        writeln!(w, "{}", vocab.tokens[id].string)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> DatagenConfig {
        DatagenConfig {
            n_scenes: 20,
            n_concepts: 12,
            n_stop_tokens: 4,
            ..DatagenConfig::default()
        }
    }

    #[test]
    fn vocab_is_deterministic_and_counts_add_up() {
        let cfg = DatagenConfig {
            n_concepts: 60,
            n_stop_tokens: 8,
            ..DatagenConfig::default()
        };
        let a = build_vocab(7, &cfg).unwrap();
        let b = build_vocab(7, &cfg).unwrap();
        assert_eq!(a.tokens.len(), b.tokens.len());
        for (x, y) in a.tokens.iter().zip(b.tokens.iter()) {
            assert_eq!(x.string, y.string);
        }
        assert_eq!(a.acoustic_templates, b.acoustic_templates);

        // V = unique content tokens + stops + end
        let content: std::collections::BTreeSet<&String> = a.concept_word_ids
            .iter()
            .flat_map(|&w| a.words[w].token_ids.iter())
            .map(|&t| &a.tokens[t].string)
            .collect();
        assert_eq!(a.tokens.len(), content.len() + 8 + 1);
    }

    #[test]
    fn decompositions_round_trip_to_words() {
        let v = build_vocab(3, &small_cfg()).unwrap();
        for &wi in &v.concept_word_ids {
            let w = &v.words[wi];
            let rebuilt: String = w
                .token_ids
                .iter()
                .map(|&t| v.tokens[t].string.trim_start_matches('▁'))
                .collect();
            assert_eq!(rebuilt, w.string);
            assert!(v.tokens[w.token_ids[0]].is_word_initial);
        }
    }

    #[test]
    fn decompositions_are_prefix_unambiguous() {
        let v = build_vocab(11, &DatagenConfig { n_concepts: 40, ..small_cfg() }).unwrap();
        let decomps: Vec<Vec<usize>> = v
            .concept_word_ids
            .iter()
            .map(|&w| v.words[w].token_ids.clone())
            .collect();
        for (i, a) in decomps.iter().enumerate() {
            for (j, b) in decomps.iter().enumerate() {
                if i == j {
                    continue;
                }
                let n = a.len().min(b.len());
                assert_ne!(a[..n], b[..n], "prefix clash between words {i} and {j}");
            }
        }
    }

    #[test]
    fn corpus_is_deterministic_and_alignments_partition() {
        let cfg = small_cfg();
        let v = build_vocab(42, &cfg).unwrap();
        let (tr1, de1, te1) = generate_corpus(&v, 42, &cfg).unwrap();
        let (tr2, ..) = generate_corpus(&v, 42, &cfg).unwrap();
        assert_eq!(tr1.len(), tr2.len());
        assert_eq!(tr1.len() + de1.len() + te1.len(), 20);
        for (a, b) in tr1.scenes.iter().zip(tr2.scenes.iter()) {
            assert_eq!(a.image_feature, b.image_feature);
            assert_eq!(a.captions.len(), b.captions.len());
        }
        for ds in [&tr1, &de1, &te1] {
            for s in &ds.scenes {
                for c in &s.captions {
                    let mut cursor = 0;
                    for &(tok, a, b) in &c.alignment {
                        assert_eq!(a, cursor);
                        assert!(b > a);
                        assert!(tok < v.tokens.len());
                        cursor = b;
                    }
                    assert_eq!(cursor, c.frames.shape()[0]);
                    // every caption token appears in the alignment
                    let at: Vec<usize> = c.alignment.iter().map(|x| x.0).collect();
                    assert_eq!(at, c.tokens);
                }
            }
        }
    }

    #[test]
    fn splits_do_not_share_concept_combinations() {
        let cfg = DatagenConfig { n_scenes: 200, n_concepts: 8, ..small_cfg() };
        let v = build_vocab(5, &cfg).unwrap();
        let (tr, de, te) = generate_corpus(&v, 5, &cfg).unwrap();
        let keys = |d: &Dataset| -> std::collections::BTreeSet<Vec<usize>> {
            d.scenes.iter().map(|s| s.concept_key()).collect()
        };
        let (a, b, c) = (keys(&tr), keys(&de), keys(&te));
        assert!(a.is_disjoint(&b));
        assert!(a.is_disjoint(&c));
        assert!(b.is_disjoint(&c));
    }

    #[test]
    fn token_frame_ratio_matches_the_sampler() {
        let cfg = DatagenConfig { n_scenes: 400, ..small_cfg() };
        let v = build_vocab(9, &cfg).unwrap();
        let (tr, de, te) = generate_corpus(&v, 9, &cfg).unwrap();
        let mut ratios = Vec::new();
        for ds in [&tr, &de, &te] {
            for s in &ds.scenes {
                for c in &s.captions {
                    ratios.push(c.tokens.len() as f64 / c.frames.shape()[0] as f64);
                }
            }
        }
        assert!(ratios.len() >= 1000, "need >= 1000 utterances, got {}", ratios.len());
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        // 1 / E[frames per token] = 1/5.5
        assert!((mean - 1.0 / 5.5).abs() < 0.05, "mean ratio {mean}");
    }

    #[test]
    fn manifest_round_trip_is_byte_identical() {
        let cfg = small_cfg();
        let v = build_vocab(42, &cfg).unwrap();
        let (tr, ..) = generate_corpus(&v, 42, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.manifest");
        let p2 = dir.path().join("b.manifest");
        write_manifest(&tr, &p1).unwrap();
        let loaded = load_manifest(&p1).unwrap();
        write_manifest(&loaded, &p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(loaded.len(), tr.len());
    }

    #[test]
    fn manifest_rejects_truncation_and_accepts_empty() {
        let cfg = small_cfg();
        let v = build_vocab(2, &cfg).unwrap();
        let (tr, ..) = generate_corpus(&v, 2, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.manifest");
        write_manifest(&tr, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let cut = bytes.len() * 2 / 3;
        std::fs::write(&p, &bytes[..cut]).unwrap();
        let err = load_manifest(&p).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");

        let empty = dir.path().join("empty.manifest");
        std::fs::write(&empty, format!("{MANIFEST_HEADER}\n")).unwrap();
        let ds = load_manifest(&empty).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn noise_free_rendering_decodes_exactly() {
        let cfg = DatagenConfig {
            sigma_speech: 0.0,
            n_scenes: 12,
            n_concepts: 10,
            ..small_cfg()
        };
        let v = build_vocab(4, &cfg).unwrap();
        let (tr, de, te) = generate_corpus(&v, 4, &cfg).unwrap();
        for ds in [&tr, &de, &te] {
            for s in &ds.scenes {
                for c in &s.captions {
                    // nearest template per frame must recover the aligned token
                    for &(tok, a, b) in &c.alignment {
                        for t in a..b {
                            let frame = c.frames.row(t);
                            let mut best = (usize::MAX, f64::INFINITY);
                            for cand in 0..v.tokens.len() {
                                let d: f64 = v
                                    .acoustic_templates
                                    .row(cand)
                                    .iter()
                                    .zip(frame.iter())
                                    .map(|(x, y)| (x - y) * (x - y))
                                    .sum();
                                if d < best.1 {
                                    best = (cand, d);
                                }
                            }
                            assert_eq!(best.0, tok);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn vocab_file_round_trip() {
        let cfg = small_cfg();
        let v = build_vocab(6, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.tsv");
        write_vocab_file(&v, &p).unwrap();
        let back = load_vocab_file(&p).unwrap();
        assert_eq!(back.tokens.len(), v.tokens.len());
        assert_eq!(back.end_token, v.end_token);
        assert_eq!(back.words.len(), v.words.len());
        for (a, b) in back.tokens.iter().zip(v.tokens.iter()) {
            assert_eq!(a.string, b.string);
            assert_eq!(a.is_stop, b.is_stop);
            assert_eq!(a.is_word_initial, b.is_word_initial);
        }
        for (a, b) in back.words.iter().zip(v.words.iter()) {
            assert_eq!(a.string, b.string);
            assert_eq!(a.token_ids, b.token_ids);
        }
    }

    #[test]
    fn tiny_corpus_is_rejected() {
        let cfg = DatagenConfig { n_scenes: 5, ..small_cfg() };
        let v = build_vocab(1, &DatagenConfig::default()).unwrap();
        assert!(generate_corpus(&v, 1, &cfg).is_err());
    }
}

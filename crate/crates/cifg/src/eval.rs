//! Quantitative evaluation: keyword extraction scores, word construction,
//! image/speech retrieval recall, and boundary scoring against the
//! synthetic ground truth.
//!
//! The keyword matcher is one-to-one: each reference token instance can be
//! claimed by at most one position. Matched counts are computed as a maximum
//! bipartite matching between positions and reference instances, which makes
//! duplicate predictions score no better than a single correct one.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::quantizer::Codebook;

/// Ordered top-k candidates (token id, cosine) for one keyword position.
pub type PositionCandidates = Vec<(usize, f64)>;

/// Counts backing one metric row; micro-averaged across utterances.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KeywordCounts {
    pub matched: usize,
    pub precision_denom: usize,
    pub recall_denom: usize,
    pub rows_counted: usize,
    pub rows_excluded: usize,
}

impl KeywordCounts {
    pub fn precision(&self) -> f64 {
        if self.precision_denom == 0 {
            0.0
        } else {
            self.matched as f64 / self.precision_denom as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.recall_denom == 0 {
            0.0
        } else {
            self.matched as f64 / self.recall_denom as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }

    pub fn absorb(&mut self, row: &KeywordCounts) {
        self.matched += row.matched;
        self.precision_denom += row.precision_denom;
        self.recall_denom += row.recall_denom;
        self.rows_counted += row.rows_counted;
        self.rows_excluded += row.rows_excluded;
    }
}

/// Maximum bipartite matching via augmenting paths. `edges[p]` lists the
/// reference instances position `p` may claim.
fn max_matching(edges: &[Vec<usize>], n_refs: usize) -> usize {
    let mut owner: Vec<Option<usize>> = vec![None; n_refs];
    let mut matched = 0usize;
    for p in 0..edges.len() {
        let mut visited = vec![false; n_refs];
        if augment(p, edges, &mut owner, &mut visited) {
            matched += 1;
        }
    }
    matched
}

fn augment(p: usize, edges: &[Vec<usize>], owner: &mut [Option<usize>], visited: &mut [bool]) -> bool {
    for &r in &edges[p] {
        if visited[r] {
            continue;
        }
        visited[r] = true;
        if owner[r].is_none() || augment(owner[r].unwrap(), edges, owner, visited) {
            owner[r] = Some(p);
            return true;
        }
    }
    false
}

/// One utterance's subword-level row.
///
/// `positions` holds each slot's ranked candidates; only the first `k` are
/// considered. With `stop_filter`, stop tokens are removed from both the
/// candidate lists and the reference before matching; the end token never
/// counts as reference content. Returns `None` when the filtered reference
/// is empty (the row is excluded from the aggregate but tallied).
pub fn keyword_row_bpe(
    positions: &[PositionCandidates],
    reference_tokens: &[usize],
    k: usize,
    stop_filter: bool,
    cb: &Codebook,
) -> Result<Option<KeywordCounts>> {
    if k < 1 {
        return Err(Error::Parameter("keyword metrics need k >= 1".into()));
    }
    let reference: Vec<usize> = reference_tokens
        .iter()
        .copied()
        .filter(|&t| t != cb.end_token && !(stop_filter && cb.is_stop_word[t]))
        .collect();
    if reference.is_empty() {
        return Ok(Some(KeywordCounts {
            rows_excluded: 1,
            ..KeywordCounts::default()
        }));
    }
    let mut precision_denom = 0usize;
    let mut edges: Vec<Vec<usize>> = Vec::with_capacity(positions.len());
    for cands in positions {
        let kept: Vec<usize> = cands
            .iter()
            .take(k)
            .map(|&(t, _)| t)
            .filter(|&t| !(stop_filter && cb.is_stop_word[t]))
            .collect();
        precision_denom += kept.len();
        let mut e = Vec::new();
        for (ri, &r) in reference.iter().enumerate() {
            if kept.contains(&r) {
                e.push(ri);
            }
        }
        edges.push(e);
    }
    let matched = max_matching(&edges, reference.len());
    Ok(Some(KeywordCounts {
        matched,
        precision_denom,
        recall_denom: reference.len(),
        rows_counted: 1,
        ..KeywordCounts::default()
    }))
}

/// Exhaustive maximum-matching count by branch and bound, for verifying the
/// production matcher on small instances.
pub fn matching_oracle(edges: &[Vec<usize>], n_refs: usize) -> usize {
    fn go(p: usize, edges: &[Vec<usize>], taken: &mut [bool]) -> usize {
        if p == edges.len() {
            return 0;
        }
        // skip this position
        let mut best = go(p + 1, edges, taken);
        for &r in &edges[p] {
            if !taken[r] {
                taken[r] = true;
                best = best.max(1 + go(p + 1, edges, taken));
                taken[r] = false;
            }
        }
        best
    }
    let mut taken = vec![false; n_refs];
    go(0, edges, &mut taken)
}

/// Segment position runs by word-initial top-1 tokens and enumerate top-k
/// combinations into lexicon words.
///
/// Runs longer than `run_cap` fall back to the top-1 choice only. A
/// combination counts when its first token is word-initial, its remaining
/// tokens are not, and the concatenated string (marker stripped) is a
/// lexicon word; each distinct word enters the multiset once per run.
pub fn construct_words(
    positions: &[PositionCandidates],
    k: usize,
    cb: &Codebook,
    run_cap: usize,
) -> Result<Vec<String>> {
    if k < 1 {
        return Err(Error::Parameter("construct_words needs k >= 1".into()));
    }
    let lexicon: std::collections::BTreeSet<&str> =
        cb.word_strings.iter().map(|s| s.as_str()).collect();
    // split at word-initial top-1 markers
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut start = 0usize;
    for (i, cands) in positions.iter().enumerate() {
        let Some(&(top1, _)) = cands.first() else { continue };
        if cb.is_word_initial[top1] && i > start {
            runs.push((start, i));
            start = i;
        }
    }
    if start < positions.len() {
        runs.push((start, positions.len()));
    }

    let mut out: Vec<String> = Vec::new();
    for &(lo, hi) in &runs {
        let span = &positions[lo..hi];
        let mut found: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
        let per_pos: Vec<Vec<usize>> = if hi - lo > run_cap {
            span.iter()
                .map(|c| c.first().map(|&(t, _)| vec![t]).unwrap_or_default())
                .collect()
        } else {
            span.iter()
                .map(|c| c.iter().take(k).map(|&(t, _)| t).collect())
                .collect()
        };
        if per_pos.iter().any(|p| p.is_empty()) {
            continue;
        }
        let mut choice = vec![0usize; per_pos.len()];
        loop {
            let tokens: Vec<usize> = choice.iter().zip(&per_pos).map(|(&c, p)| p[c]).collect();
            let valid = cb.is_word_initial[tokens[0]]
                && tokens[1..].iter().all(|&t| !cb.is_word_initial[t])
                && !tokens.iter().any(|&t| t == cb.end_token);
            if valid {
                let word: String = tokens
                    .iter()
                    .map(|&t| cb.token_strings[t].trim_start_matches('▁'))
                    .collect();
                if lexicon.contains(word.as_str()) {
                    found.insert(word);
                }
            }
            // odometer
            let mut pos = choice.len();
            loop {
                if pos == 0 {
                    break;
                }
                pos -= 1;
                choice[pos] += 1;
                if choice[pos] < per_pos[pos].len() {
                    break;
                }
                choice[pos] = 0;
            }
            if choice.iter().all(|&c| c == 0) {
                break;
            }
        }
        out.extend(found);
    }
    Ok(out)
}

/// Word-level row: one-to-one multiset matching of predicted words against
/// the reference caption words.
pub fn keyword_row_word(
    predicted: &[String],
    reference: &[String],
    stop_filter: bool,
    stop_words: &std::collections::BTreeSet<String>,
) -> Option<KeywordCounts> {
    let keep = |w: &String| !(stop_filter && stop_words.contains(w));
    let pred: Vec<&String> = predicted.iter().filter(|w| keep(w)).collect();
    let refs: Vec<&String> = reference.iter().filter(|w| keep(w)).collect();
    if refs.is_empty() {
        return Some(KeywordCounts {
            rows_excluded: 1,
            ..KeywordCounts::default()
        });
    }
    let mut ref_counts: BTreeMap<&String, usize> = BTreeMap::new();
    for w in &refs {
        *ref_counts.entry(w).or_default() += 1;
    }
    let mut matched = 0usize;
    for w in &pred {
        if let Some(c) = ref_counts.get_mut(w) {
            if *c > 0 {
                *c -= 1;
                matched += 1;
            }
        }
    }
    Some(KeywordCounts {
        matched,
        precision_denom: pred.len(),
        recall_denom: refs.len(),
        rows_counted: 1,
        rows_excluded: 0,
    })
}

/// Decode a caption token sequence back into words using the lexicon
/// decompositions (prefix-unambiguous by construction). The end token is
/// skipped.
pub fn tokens_to_words(
    tokens: &[usize],
    words: &[crate::datagen::WordInfo],
    end_token: usize,
) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut cursor = 0usize;
    while cursor < tokens.len() {
        if tokens[cursor] == end_token {
            cursor += 1;
            continue;
        }
        let mut hit = None;
        for w in words {
            let n = w.token_ids.len();
            if cursor + n <= tokens.len() && tokens[cursor..cursor + n] == w.token_ids[..] {
                hit = Some(w);
                break;
            }
        }
        let Some(w) = hit else {
            return Err(Error::Data(format!(
                "token sequence not decodable at position {cursor}"
            )));
        };
        out.push(w.string.clone());
        cursor += w.token_ids.len();
    }
    Ok(out)
}

/// Recall@k both ways between ranked cosine scores.
#[derive(Debug, Clone)]
pub struct RetrievalReport {
    pub ks: Vec<usize>,
    pub speech_to_image: Vec<f64>,
    pub image_to_speech: Vec<f64>,
}

impl RetrievalReport {
    pub fn speech_to_image_at(&self, k: usize) -> Option<f64> {
        self.ks
            .iter()
            .position(|&x| x == k)
            .map(|i| self.speech_to_image[i])
    }

    pub fn image_to_speech_at(&self, k: usize) -> Option<f64> {
        self.ks
            .iter()
            .position(|&x| x == k)
            .map(|i| self.image_to_speech[i])
    }
}

/// `audio_emb` is `[n_audio, d]`, `image_emb` `[n_image, d]`;
/// `audio_to_image[a]` is the true image of caption `a`.
///
/// Speech-to-image ranks images per caption and scores a hit when the true
/// image is in the top k. Image-to-speech ranks captions per image and
/// scores a hit when any of the image's captions appears.
pub fn retrieval_recall(
    audio_emb: &ndarray::Array2<f64>,
    image_emb: &ndarray::Array2<f64>,
    audio_to_image: &[usize],
    ks: &[usize],
) -> Result<RetrievalReport> {
    let (na, ni) = (audio_emb.shape()[0], image_emb.shape()[0]);
    if na == 0 || ni == 0 {
        return Err(Error::Data("retrieval over empty embedding sets".into()));
    }
    if audio_emb.shape()[1] != image_emb.shape()[1] {
        return Err(Error::shape("retrieval embedding dims differ"));
    }
    if audio_to_image.len() != na || audio_to_image.iter().any(|&i| i >= ni) {
        return Err(Error::Data("audio-to-image truth map invalid".into()));
    }
    let norm_rows = |m: &ndarray::Array2<f64>| -> Result<ndarray::Array2<f64>> {
        let mut out = m.clone();
        for mut r in out.rows_mut() {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::Numeric("zero-norm retrieval embedding".into()));
            }
            r.mapv_inplace(|v| v / n);
        }
        Ok(out)
    };
    let a = norm_rows(audio_emb)?;
    let i = norm_rows(image_emb)?;
    let scores = a.dot(&i.t()); // [na, ni]

    let rank_desc = |row: &[f64]| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&x, &y| row[y].partial_cmp(&row[x]).unwrap().then(x.cmp(&y)));
        idx
    };

    let mut s2i = vec![0usize; ks.len()];
    for arow in 0..na {
        let ranked = rank_desc(&scores.row(arow).to_vec());
        let true_pos = ranked.iter().position(|&x| x == audio_to_image[arow]).unwrap();
        for (ki, &k) in ks.iter().enumerate() {
            if true_pos < k {
                s2i[ki] += 1;
            }
        }
    }

    let mut images_to_audios: Vec<Vec<usize>> = vec![Vec::new(); ni];
    for (a_idx, &img) in audio_to_image.iter().enumerate() {
        images_to_audios[img].push(a_idx);
    }
    let mut i2s = vec![0usize; ks.len()];
    let mut n_images_with_truth = 0usize;
    for img in 0..ni {
        if images_to_audios[img].is_empty() {
            continue;
        }
        n_images_with_truth += 1;
        let col: Vec<f64> = (0..na).map(|arow| scores[[arow, img]]).collect();
        let ranked = rank_desc(&col);
        let best = ranked
            .iter()
            .position(|x| images_to_audios[img].contains(x))
            .unwrap();
        for (ki, &k) in ks.iter().enumerate() {
            if best < k {
                i2s[ki] += 1;
            }
        }
    }
    if n_images_with_truth == 0 {
        return Err(Error::Data("no image owns a caption".into()));
    }

    Ok(RetrievalReport {
        ks: ks.to_vec(),
        speech_to_image: s2i.iter().map(|&h| h as f64 / na as f64).collect(),
        image_to_speech: i2s
            .iter()
            .map(|&h| h as f64 / n_images_with_truth as f64)
            .collect(),
    })
}

/// Precision/recall/F1 of predicted firing frames against true token end
/// frames, matched one-to-one within `tolerance` frames.
pub fn boundary_score(fires: &[usize], true_ends: &[usize], tolerance: usize) -> (f64, f64, f64) {
    let mut fires = fires.to_vec();
    let mut ends = true_ends.to_vec();
    fires.sort_unstable();
    ends.sort_unstable();
    let mut matched = 0usize;
    let mut ei = 0usize;
    for &f in &fires {
        while ei < ends.len() && ends[ei] + tolerance < f {
            ei += 1;
        }
        if ei < ends.len() && ends[ei] <= f + tolerance {
            matched += 1;
            ei += 1;
        }
    }
    let p = if fires.is_empty() {
        0.0
    } else {
        matched as f64 / fires.len() as f64
    };
    let r = if ends.is_empty() {
        0.0
    } else {
        matched as f64 / ends.len() as f64
    };
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f1)
}

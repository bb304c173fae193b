//! Planted-signal synthetic datasets with analytically known per-modality
//! Bayes accuracies.
//!
//! Each modality carries an independent class signal of chosen strength mu:
//! the Gaussian channels (image, one metadata feature) have Bayes accuracy
//! Phi(mu) in closed form; the token channels use a tilted-unigram
//! construction whose tilt is calibrated so the optimal count-difference
//! rule also hits Phi(mu). Log-likelihood ratios add across modalities, so
//! the all-modality optimum is Phi(sqrt(sum mu^2)).

use crate::data_model::{PostingRecord, RasterImage, Split};
use crate::error::{Error, Result};
use crate::ingest::DatasetSplits;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// Strengths reverse-engineered from the monomodal accuracy targets
/// 0.881 / 0.867 / 0.810 / 0.778 (title, comments, image, metadata).
pub const DEFAULT_MU: [f64; 4] = [1.18, 1.11, 0.878, 0.765];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub mu_title: f64,
    pub mu_comments: f64,
    pub mu_image: f64,
    pub mu_meta: f64,
    /// Tokens per title document.
    pub title_tokens: usize,
    /// Tokens per consolidated comments document.
    pub comments_tokens: usize,
    /// Signal words per sign in the vocabulary.
    pub signal_words: usize,
    pub neutral_words: usize,
    /// Square image edge length; signal pattern is a constant offset of
    /// unit L2 norm over all channels.
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_train: 20_000,
            n_val: 2_000,
            n_test: 5_000,
            mu_title: DEFAULT_MU[0],
            mu_comments: DEFAULT_MU[1],
            mu_image: DEFAULT_MU[2],
            mu_meta: DEFAULT_MU[3],
            title_tokens: 24,
            comments_tokens: 48,
            signal_words: 16,
            neutral_words: 32,
            image_size: 32,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train < 2 || self.n_val < 2 || self.n_test < 2 {
            return Err(Error::InvalidConfig("every split needs at least 2 samples".into()));
        }
        for mu in [self.mu_title, self.mu_comments, self.mu_image, self.mu_meta] {
            if mu < 0.0 {
                return Err(Error::InvalidConfig("signal strengths must be non-negative".into()));
            }
        }
        if self.title_tokens == 0 || self.comments_tokens == 0 || self.signal_words == 0 {
            return Err(Error::InvalidConfig("token channel sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Standard normal CDF.
pub fn phi(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// Inverse standard normal CDF.
pub fn phi_inv(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Word lists whose hashed token ids are pairwise distinct, so the planted
/// signal survives the hashing tokenizer unweakened.
#[derive(Debug, Clone)]
pub struct SynthVocab {
    pub positive: Vec<String>,
    pub negative: Vec<String>,
    pub neutral: Vec<String>,
}

impl SynthVocab {
    pub fn build(signal_words: usize, neutral_words: usize) -> SynthVocab {
        let mut seen = std::collections::HashSet::new();
        let mut take = |prefix: &str, count: usize| -> Vec<String> {
            let mut out = Vec::with_capacity(count);
            let mut i = 0usize;
            while out.len() < count {
                let word = format!("{prefix}{i:03}");
                i += 1;
                if seen.insert(crate::preprocess::tokenize(&word)[0]) {
                    out.push(word);
                }
            }
            out
        };
        SynthVocab {
            positive: take("pos", signal_words),
            negative: take("neg", signal_words),
            neutral: take("mid", neutral_words),
        }
    }
}

/// One tilted-unigram token channel. Under class s in {+1,-1} a token is a
/// positive-signal word with weight e^(s*eps), a negative-signal word with
/// weight e^(-s*eps), or a neutral word with weight 1. The Bayes rule is
/// the sign of (#positive - #negative) over the document.
#[derive(Debug, Clone)]
pub struct TokenChannel {
    pub eps: f64,
    pub signal_words: usize,
    pub neutral_words: usize,
    pub tokens_per_doc: usize,
}

impl TokenChannel {
    /// Per-token category probabilities (positive, negative, neutral) for
    /// class `s`.
    fn category_probs(&self, s: f64) -> [f64; 3] {
        let wp = self.signal_words as f64 * (s * self.eps).exp();
        let wn = self.signal_words as f64 * (-s * self.eps).exp();
        let w0 = self.neutral_words as f64;
        let z = wp + wn + w0;
        [wp / z, wn / z, w0 / z]
    }

    /// Exact Bayes accuracy of the count-difference rule, by dynamic
    /// programming over the trinomial token distribution. Ties count half.
    pub fn bayes_accuracy(&self) -> f64 {
        if self.eps == 0.0 {
            return 0.5;
        }
        let [pp, pn, p0] = self.category_probs(1.0);
        let t = self.tokens_per_doc;
        // dp over count difference, offset by t
        let mut dp = vec![0.0f64; 2 * t + 1];
        dp[t] = 1.0;
        for _ in 0..t {
            let mut next = vec![0.0f64; 2 * t + 1];
            for (d, &mass) in dp.iter().enumerate() {
                if mass == 0.0 {
                    continue;
                }
                if d + 1 <= 2 * t {
                    next[d + 1] += mass * pp;
                }
                if d >= 1 {
                    next[d - 1] += mass * pn;
                }
                next[d] += mass * p0;
            }
            dp = next;
        }
        let above: f64 = dp[t + 1..].iter().sum();
        above + 0.5 * dp[t]
    }

    /// Sample the count difference of one document for class `s`.
    pub fn sample_count_diff(&self, s: f64, rng: &mut impl Rng) -> i64 {
        let [pp, pn, _] = self.category_probs(s);
        let mut d = 0i64;
        for _ in 0..self.tokens_per_doc {
            let u: f64 = rng.gen();
            if u < pp {
                d += 1;
            } else if u < pp + pn {
                d -= 1;
            }
        }
        d
    }

    /// Sample one document as words for class `s`.
    fn sample_words(&self, s: f64, vocab: &SynthVocab, rng: &mut impl Rng) -> String {
        let [pp, pn, _] = self.category_probs(s);
        let mut words = Vec::with_capacity(self.tokens_per_doc);
        for _ in 0..self.tokens_per_doc {
            let u: f64 = rng.gen();
            let word = if u < pp {
                &vocab.positive[rng.gen_range(0..self.signal_words)]
            } else if u < pp + pn {
                &vocab.negative[rng.gen_range(0..self.signal_words)]
            } else {
                &vocab.neutral[rng.gen_range(0..self.neutral_words)]
            };
            words.push(word.as_str());
        }
        words.join(" ")
    }
}

/// Find the tilt whose exact Bayes accuracy equals Phi(mu), by bisection.
pub fn calibrate_tilt(
    mu: f64,
    tokens_per_doc: usize,
    signal_words: usize,
    neutral_words: usize,
) -> TokenChannel {
    let mut channel =
        TokenChannel { eps: 0.0, signal_words, neutral_words, tokens_per_doc };
    if mu == 0.0 {
        return channel;
    }
    let target = phi(mu);
    let (mut lo, mut hi) = (0.0f64, 8.0f64);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        channel.eps = mid;
        if channel.bayes_accuracy() < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    channel.eps = 0.5 * (lo + hi);
    channel
}

/// Closed-form / exact Bayes accuracies for a spec.
#[derive(Debug, Clone, PartialEq)]
pub struct BayesAccuracies {
    pub title: f64,
    pub comments: f64,
    pub image: f64,
    pub metadata: f64,
    pub combined: f64,
}

/// Per-modality optima (Phi(mu) for the Gaussian channels, exact count-rule
/// accuracy for the calibrated token channels) and the all-modality optimum
/// Phi(sqrt(sum mu^2)).
pub fn bayes_accuracy(spec: &SynthSpec) -> BayesAccuracies {
    let title =
        calibrate_tilt(spec.mu_title, spec.title_tokens, spec.signal_words, spec.neutral_words)
            .bayes_accuracy();
    let comments = calibrate_tilt(
        spec.mu_comments,
        spec.comments_tokens,
        spec.signal_words,
        spec.neutral_words,
    )
    .bayes_accuracy();
    let combined_mu = (spec.mu_title.powi(2)
        + spec.mu_comments.powi(2)
        + spec.mu_image.powi(2)
        + spec.mu_meta.powi(2))
    .sqrt();
    BayesAccuracies {
        title,
        comments,
        image: phi(spec.mu_image),
        metadata: phi(spec.mu_meta),
        combined: phi(combined_mu),
    }
}

/// Pixel quantization scale: one latent standard deviation spans this many
/// of the 256 pixel levels.
const PIXEL_SCALE: f64 = 30.0;

fn generate_image(size: usize, mu: f64, s: f64, rng: &mut impl Rng) -> RasterImage {
    let entries = 3 * size * size;
    // constant pattern with unit L2 norm over all entries
    let per_entry = s * mu / (entries as f64).sqrt();
    let mut pixels = Vec::with_capacity(entries);
    for _ in 0..entries {
        let noise: f64 = StandardNormal.sample(rng);
        let latent = per_entry + noise;
        let px = (128.0 + PIXEL_SCALE * latent).round().clamp(0.0, 255.0);
        pixels.push(px as u8);
    }
    // interleave to HxWx3: entries were drawn i.i.d., so layout is free
    RasterImage::new(size, size, pixels)
}

fn generate_record(
    spec: &SynthSpec,
    vocab: &SynthVocab,
    title_channel: &TokenChannel,
    comments_channel: &TokenChannel,
    split: Split,
    index: usize,
    stream: u64,
) -> PostingRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let label: u8 = rng.gen_range(0..2);
    let s = if label == 1 { 1.0 } else { -1.0 };
    let noise: f64 = StandardNormal.sample(&mut rng);
    let score = s * spec.mu_meta + noise;
    let upvote_ratio: f64 = rng.gen();
    let extra_noise: f64 = StandardNormal.sample(&mut rng);
    let num_comments = (extra_noise.abs() * 10.0).round();
    PostingRecord {
        id: {
            let prefix = match split {
                Split::Train => "trn",
                Split::Validation => "val",
                Split::Test => "tst",
            };
            format!("{prefix}{index:06}")
        },
        title_text: title_channel.sample_words(s, vocab, &mut rng),
        comments_text: comments_channel.sample_words(s, vocab, &mut rng),
        image: generate_image(spec.image_size, spec.mu_image, s, &mut rng),
        metadata: vec![upvote_ratio, score, num_comments],
        label,
        split,
    }
}

/// Generate all three splits. Records are a pure function of (seed, split,
/// index), so regeneration is bitwise reproducible.
pub fn generate(spec: &SynthSpec) -> Result<DatasetSplits> {
    spec.validate()?;
    let title_channel =
        calibrate_tilt(spec.mu_title, spec.title_tokens, spec.signal_words, spec.neutral_words);
    let comments_channel = calibrate_tilt(
        spec.mu_comments,
        spec.comments_tokens,
        spec.signal_words,
        spec.neutral_words,
    );
    let vocab = SynthVocab::build(spec.signal_words, spec.neutral_words);
    let mut splits = DatasetSplits::default();
    let plan = [
        (Split::Train, spec.n_train, 0u64),
        (Split::Validation, spec.n_val, 1u64 << 40),
        (Split::Test, spec.n_test, 2u64 << 40),
    ];
    for (split, n, base) in plan {
        let out = match split {
            Split::Train => &mut splits.train,
            Split::Validation => &mut splits.validation,
            Split::Test => &mut splits.test,
        };
        for i in 0..n {
            out.push(generate_record(
                spec,
                &vocab,
                &title_channel,
                &comments_channel,
                split,
                i,
                base + i as u64,
            ));
        }
    }
    Ok(splits)
}

/// Monte-Carlo Bayes-rule accuracy of one Gaussian channel with strength
/// `mu` (decision: sign of the projected statistic).
pub fn mc_gaussian_accuracy(mu: f64, draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut correct = 0usize;
    for _ in 0..draws {
        let s: f64 = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let noise: f64 = StandardNormal.sample(&mut rng);
        let stat = s * mu + noise;
        let decided = if stat > 0.0 { 1.0 } else { -1.0 };
        if decided == s {
            correct += 1;
        }
    }
    correct as f64 / draws as f64
}

/// Monte-Carlo Bayes-rule accuracy of one token channel.
pub fn mc_token_accuracy(channel: &TokenChannel, draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut correct = 0.0f64;
    for _ in 0..draws {
        let s: f64 = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let d = channel.sample_count_diff(s, &mut rng);
        if d == 0 {
            correct += 0.5;
        } else if (d > 0) == (s > 0.0) {
            correct += 1.0;
        }
    }
    correct / draws as f64
}

/// Monte-Carlo accuracy of the combined four-channel Bayes rule: channel
/// log-likelihood ratios add (2*mu*stat for Gaussian channels, 2*eps*count
/// difference for token channels).
pub fn mc_combined_accuracy(spec: &SynthSpec, draws: usize, seed: u64) -> f64 {
    let title =
        calibrate_tilt(spec.mu_title, spec.title_tokens, spec.signal_words, spec.neutral_words);
    let comments = calibrate_tilt(
        spec.mu_comments,
        spec.comments_tokens,
        spec.signal_words,
        spec.neutral_words,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut correct = 0.0f64;
    for _ in 0..draws {
        let s: f64 = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let mut llr = 0.0;
        for mu in [spec.mu_image, spec.mu_meta] {
            let noise: f64 = StandardNormal.sample(&mut rng);
            llr += 2.0 * mu * (s * mu + noise);
        }
        llr += 2.0 * title.eps * title.sample_count_diff(s, &mut rng) as f64;
        llr += 2.0 * comments.eps * comments.sample_count_diff(s, &mut rng) as f64;
        if llr == 0.0 {
            correct += 0.5;
        } else if (llr > 0.0) == (s > 0.0) {
            correct += 1.0;
        }
    }
    correct / draws as f64
}

/// Write splits in the exact TSV + image-directory layout the ingest module
/// consumes: `posts.tsv`, `comments.tsv`, and `images/<id>.png`. Comments
/// are emitted as two rows per post whose bodies rejoin to the consolidated
/// string.
pub fn write_dataset(splits: &DatasetSplits, dir: &std::path::Path) -> Result<()> {
    use std::io::Write;
    std::fs::create_dir_all(dir.join("images"))?;
    let mut posts = std::io::BufWriter::new(std::fs::File::create(dir.join("posts.tsv"))?);
    writeln!(
        posts,
        "id\tclean_title\timage_url\t2_way_label\tupvote_ratio\tscore\tnum_comments\tsplit"
    )?;
    let mut comments = std::io::BufWriter::new(std::fs::File::create(dir.join("comments.tsv"))?);
    writeln!(comments, "submission_id\tbody")?;
    for record in splits.train.iter().chain(&splits.validation).chain(&splits.test) {
        writeln!(
            posts,
            "{id}\t{title}\t{id}.png\t{label}\t{m0}\t{m1}\t{m2}\t{split}",
            id = record.id,
            title = record.title_text,
            label = record.label,
            m0 = record.metadata[0],
            m1 = record.metadata[1],
            m2 = record.metadata[2],
            split = record.split.as_str(),
        )?;
        let words: Vec<&str> = record.comments_text.split(' ').collect();
        let half = words.len() / 2;
        writeln!(comments, "{}\t{}", record.id, words[..half.max(1)].join(" "))?;
        if half < words.len() {
            writeln!(comments, "{}\t{}", record.id, words[half.max(1)..].join(" "))?;
        }
        let img = image::RgbImage::from_raw(
            record.image.width as u32,
            record.image.height as u32,
            record.image.pixels.clone(),
        )
        .ok_or_else(|| Error::Image("bad buffer".into()))?;
        img.save(dir.join("images").join(format!("{}.png", record.id)))
            .map_err(|e| Error::Image(e.to_string()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_ids_are_distinct_after_hashing() {
        let v = SynthVocab::build(16, 32);
        let mut ids = std::collections::HashSet::new();
        for w in v.positive.iter().chain(&v.negative).chain(&v.neutral) {
            assert!(ids.insert(crate::preprocess::tokenize(w)[0]), "collision on {w}");
        }
    }

    #[test]
    fn zero_strength_channels_are_chance() {
        let channel = calibrate_tilt(0.0, 24, 16, 32);
        assert_eq!(channel.bayes_accuracy(), 0.5);
        assert!((phi(0.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn metadata_target_matches_phi() {
        assert!((phi(0.765) - 0.7779).abs() < 5e-4);
    }

    #[test]
    fn default_strengths_hit_monomodal_targets() {
        let spec = SynthSpec::default();
        let acc = bayes_accuracy(&spec);
        assert!((acc.title - 0.881).abs() < 2e-3, "title {}", acc.title);
        assert!((acc.comments - 0.867).abs() < 2e-3, "comments {}", acc.comments);
        assert!((acc.image - 0.810).abs() < 2e-3, "image {}", acc.image);
        assert!((acc.metadata - 0.778).abs() < 2e-3, "metadata {}", acc.metadata);
        // combined: Phi(sqrt(sum mu^2)) ~ Phi(1.995) ~ 0.977
        assert!((acc.combined - 0.977).abs() < 2e-3, "combined {}", acc.combined);
    }

    #[test]
    fn calibrated_tilt_matches_target_closely() {
        let channel = calibrate_tilt(1.18, 24, 16, 32);
        assert!((channel.bayes_accuracy() - phi(1.18)).abs() < 1e-6);
    }

    #[test]
    fn monotone_in_strength() {
        let lo = calibrate_tilt(0.5, 24, 16, 32);
        let hi = calibrate_tilt(1.5, 24, 16, 32);
        assert!(hi.bayes_accuracy() > lo.bayes_accuracy());
        assert!(phi(1.5) > phi(0.5));
    }

    #[test]
    fn generation_is_reproducible() {
        let spec = SynthSpec { n_train: 4, n_val: 2, n_test: 2, ..SynthSpec::default() };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.title_text, y.title_text);
            assert_eq!(x.comments_text, y.comments_text);
            assert_eq!(x.image, y.image);
            assert_eq!(x.metadata, y.metadata);
            assert_eq!(x.label, y.label);
        }
    }

    #[test]
    fn generated_records_are_complete() {
        let spec = SynthSpec { n_train: 8, n_val: 2, n_test: 2, ..SynthSpec::default() };
        let splits = generate(&spec).unwrap();
        let schema = crate::data_model::MetadataSchema::fakeddit_default();
        for r in &splits.train {
            assert!(crate::data_model::validate_record(r, &schema).is_empty());
        }
    }

    #[test]
    fn labels_roughly_balanced() {
        let spec = SynthSpec { n_train: 400, n_val: 2, n_test: 2, ..SynthSpec::default() };
        let splits = generate(&spec).unwrap();
        let ones = splits.train.iter().filter(|r| r.label == 1).count();
        assert!(ones > 120 && ones < 280, "ones = {ones}");
    }

    #[test]
    fn too_small_split_rejected() {
        let spec = SynthSpec { n_train: 1, ..SynthSpec::default() };
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn mc_gaussian_close_to_phi() {
        let acc = mc_gaussian_accuracy(0.765, 200_000, 11);
        assert!((acc - phi(0.765)).abs() < 0.005, "{acc}");
    }
}

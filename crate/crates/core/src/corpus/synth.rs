//! Synthetic style corpus: template sentences rendered in positive or
//! negative polarity along four surface-style axes. A desk-scale stand-in
//! for the real style-triplet datasets; "authors" are (style, polarity)
//! combinations.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AuthorPair, CorpusError, LabeledSentence, Polarity, Result, Triplet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Style {
    Uppercase,
    Emoji,
    Misspell,
    Contraction,
}

impl Style {
    pub const ALL: [Style; 4] = [Style::Uppercase, Style::Emoji, Style::Misspell, Style::Contraction];

    pub fn name(self) -> &'static str {
        match self {
            Style::Uppercase => "uppercase",
            Style::Emoji => "emoji",
            Style::Misspell => "misspell",
            Style::Contraction => "contraction",
        }
    }
}

impl std::str::FromStr for Style {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Style> {
        match s {
            "uppercase" => Ok(Style::Uppercase),
            "emoji" => Ok(Style::Emoji),
            "misspell" => Ok(Style::Misspell),
            "contraction" => Ok(Style::Contraction),
            other => Err(CorpusError::UnknownStyle(other.to_string())),
        }
    }
}

const SUBJECTS: [&str; 8] =
    ["i", "we", "you", "they", "the kids", "our friends", "my brother", "the team"];
const AUXES: [&str; 8] = [
    "do not", "can not", "will not", "have not", "did not", "would not", "could not", "should not",
];
const VERBS: [&str; 8] = ["like", "want", "need", "take", "watch", "find", "bring", "choose"];
// every object noun is long enough for the misspelling letter swap, so the
// misspell polarities always differ
const OBJECTS: [&str; 8] = [
    "the river",
    "the coffee",
    "the movie",
    "the garden",
    "the music",
    "the window",
    "the puzzle",
    "the letter",
];
const TAILS: [&str; 8] = [
    "today",
    "this morning",
    "right now",
    "at home",
    "after lunch",
    "on sunday",
    "this week",
    "at night",
];

const CONTRACTIONS: [(&str, &str); 8] = [
    ("do not", "don't"),
    ("can not", "can't"),
    ("will not", "won't"),
    ("have not", "haven't"),
    ("did not", "didn't"),
    ("would not", "wouldn't"),
    ("could not", "couldn't"),
    ("should not", "shouldn't"),
];

const EMOTICONS: [&str; 3] = [":)", ";)", ":p"];

/// Number of distinct content templates.
pub const TEMPLATE_CAPACITY: usize = 8 * 8 * 8 * 8 * 8;

fn template_words(index: usize) -> Vec<String> {
    let i = index % TEMPLATE_CAPACITY;
    let subj = SUBJECTS[i % 8];
    let aux = AUXES[(i / 8) % 8];
    let verb = VERBS[(i / 64) % 8];
    let obj = OBJECTS[(i / 512) % 8];
    let tail = TAILS[(i / 4096) % 8];
    format!("{subj} {aux} {verb} {obj} {tail}")
        .split_whitespace()
        .map(|w| w.to_string())
        .collect()
}

fn proper_case(words: &[String]) -> String {
    let mut s = words.join(" ");
    if let Some(first) = s.get(0..1) {
        let upper = first.to_uppercase();
        s.replace_range(0..1, &upper);
    }
    s
}

fn swap_letters(word: &str) -> String {
    let mut chars: Vec<char> = word.chars().collect();
    if chars.len() >= 5 {
        chars.swap(1, 2);
    }
    chars.into_iter().collect()
}

/// Render one template in the given style and polarity. The two polarities
/// differ only along the style's axis; all other axes use a neutral form
/// (proper case, expanded contractions, clean spelling, no emoticon).
pub fn render(template: usize, style: Style, polarity: Polarity) -> String {
    let words = template_words(template);
    match (style, polarity) {
        (Style::Uppercase, Polarity::Pos) => words.join(" ").to_uppercase(),
        (Style::Uppercase, Polarity::Neg) => proper_case(&words),
        (Style::Emoji, Polarity::Pos) => {
            format!("{} {}", proper_case(&words), EMOTICONS[template % EMOTICONS.len()])
        }
        (Style::Emoji, Polarity::Neg) => proper_case(&words),
        (Style::Misspell, Polarity::Pos) => {
            let swapped: Vec<String> = words.iter().map(|w| swap_letters(w)).collect();
            proper_case(&swapped)
        }
        (Style::Misspell, Polarity::Neg) => proper_case(&words),
        (Style::Contraction, Polarity::Pos) => {
            let mut s = words.join(" ");
            for (expanded, contracted) in CONTRACTIONS {
                s = s.replace(expanded, contracted);
            }
            let contracted: Vec<String> = s.split_whitespace().map(|w| w.to_string()).collect();
            proper_case(&contracted)
        }
        (Style::Contraction, Polarity::Neg) => proper_case(&words),
    }
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub triplets: Vec<Triplet>,
    pub labeled: Vec<LabeledSentence>,
    pub pairs: Vec<AuthorPair>,
}

impl SynthCorpus {
    /// Every distinct text in the corpus, in first-appearance order.
    pub fn all_texts(&self) -> Vec<String> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        let mut push = |t: &String| {
            if seen.insert(t.clone()) {
                out.push(t.clone());
            }
        };
        for t in &self.triplets {
            push(&t.anchor);
            push(&t.positive);
            push(&t.negative);
        }
        for l in &self.labeled {
            push(&l.text);
        }
        for p in &self.pairs {
            push(&p.a);
            push(&p.b);
        }
        out
    }
}

/// Generate triplets, labeled sentences, and author pairs for the given
/// styles. Each style draws its own contiguous block of content templates,
/// so styles never share sentences. Deterministic under `rng_seed`.
///
/// Per style: `n` pos-anchored triplets (positive = next template, same
/// style and polarity; negative = same template, opposite polarity),
/// `n * 2` labeled sentences (positive block then negative block), and
/// `n` author pairs (half same-author, half cross-author).
pub fn gen_style_corpus(
    n_per_style: usize,
    styles: &[Style],
    rng_seed: u64,
) -> Result<SynthCorpus> {
    if n_per_style < 4 {
        return Err(CorpusError::InvalidArgument(format!(
            "n_per_style must be >= 4, got {n_per_style}"
        )));
    }
    if styles.is_empty() {
        return Err(CorpusError::InvalidArgument("no styles given".into()));
    }
    let mut dedup = Vec::new();
    for &s in styles {
        if !dedup.contains(&s) {
            dedup.push(s);
        }
    }
    let styles = dedup;
    let seg = TEMPLATE_CAPACITY / styles.len();
    if n_per_style > seg {
        return Err(CorpusError::InvalidArgument(format!(
            "n_per_style {} exceeds per-style template capacity {}",
            n_per_style, seg
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    // spread each style's templates across its segment for content variety
    let stride = (seg / n_per_style).max(1);
    let offsets: Vec<usize> = (0..styles.len())
        .map(|s| s * seg + rng.random_range(0..=(seg - (n_per_style - 1) * stride - 1)))
        .collect();
    let template = |offset: usize, i: usize| offset + i * stride;

    let mut triplets = Vec::new();
    let mut labeled = Vec::new();
    for (si, &style) in styles.iter().enumerate() {
        let base = offsets[si];
        for i in 0..n_per_style {
            triplets.push(Triplet {
                anchor: render(template(base, i), style, Polarity::Pos),
                positive: render(template(base, (i + 1) % n_per_style), style, Polarity::Pos),
                negative: render(template(base, i), style, Polarity::Neg),
                style: Some(style.name().to_string()),
                polarity: Some(Polarity::Pos),
            });
        }
        for pol in [Polarity::Pos, Polarity::Neg] {
            for i in 0..n_per_style {
                labeled.push(LabeledSentence {
                    text: render(template(base, i), style, pol),
                    style: style.name().to_string(),
                    polarity: pol,
                });
            }
        }
    }

    // authors = (style, polarity) combos; same-author pairs use adjacent
    // templates, cross-author pairs use the next author in order
    let authors: Vec<(usize, Polarity)> = (0..styles.len())
        .flat_map(|si| [(si, Polarity::Pos), (si, Polarity::Neg)])
        .collect();
    let mut pairs = Vec::new();
    for (ai, &(si, pol)) in authors.iter().enumerate() {
        let base = offsets[si];
        for j in 0..n_per_style / 2 {
            pairs.push(AuthorPair {
                a: render(template(base, 2 * j), styles[si], pol),
                b: render(template(base, 2 * j + 1), styles[si], pol),
                same: true,
            });
        }
        let (bsi, bpol) = authors[(ai + 1) % authors.len()];
        let bbase = offsets[bsi];
        for j in 0..n_per_style / 2 {
            let pick = rng.random_range(0..n_per_style);
            pairs.push(AuthorPair {
                a: render(template(base, j), styles[si], pol),
                b: render(template(bbase, pick), styles[bsi], bpol),
                same: false,
            });
        }
    }

    Ok(SynthCorpus { triplets, labeled, pairs })
}

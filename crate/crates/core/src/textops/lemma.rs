//! Rule-based English lemmatizer for frequency reports.
//!
//! Suffix rules are applied repeatedly until none fires, so the result is a
//! fixed point and `lemmatize` is idempotent. Every rule strictly shortens
//! the word, which bounds the loop.

/// Words the suffix rules must leave alone.
const KEEP: &[&str] = &[
    "news",
    "this",
    "thus",
    "was",
    "has",
    "is",
    "his",
    "hers",
    "its",
    "yes",
    "always",
    "perhaps",
    "series",
    "species",
    "less",
    "unless",
    "does",
    "goes",
    "bus",
    "gas",
    "lens",
    "bias",
    "chaos",
    "plus",
    "minus",
    "whereas",
    "sometimes",
    "afterwards",
    "towards",
    "anything",
    "everything",
    "nothing",
    "something",
    "thing",
    "things",
    "during",
    "morning",
    "evening",
    "ceiling",
    "king",
    "ring",
    "spring",
    "string",
    "wing",
    "bring",
    "sing",
    "swing",
    "sting",
    "anyways",
    "red",
    "bed",
    "need",
    "feed",
    "seed",
    "speed",
    "weed",
    "shed",
    "hundred",
    "sacred",
    "wicked",
    "naked",
    "never",
    "ever",
    "however",
    "whatever",
    "over",
    "under",
    "after",
    "other",
    "another",
    "either",
    "neither",
    "whether",
    "rather",
    "water",
    "paper",
    "power",
    "number",
    "computer",
    "summer",
    "winter",
    "dinner",
    "super",
    "later",
    "better",
    "ever",
    "her",
    "per",
    "river",
    "father",
    "mother",
    "brother",
    "sister",
    "monster",
    "chapter",
    "center",
    "letter",
    "weather",
    "together",
    "forever",
    "member",
    "manager",
    "user",
    "player",
    "leader",
    "worker",
    "teacher",
    "driver",
    "lover",
    "lawyer",
    "soccer",
    "poster",
    "master",
    "honest",
    "interest",
    "best",
    "west",
    "nest",
    "rest",
    "test",
    "guest",
    "chest",
    "forest",
    "latest",
    "biggest",
    "modest",
    "protest",
    "request",
    "suggest",
    "contest",
    "harvest",
    "invest",
    "arrest",
    "closest",
];

fn is_vowel(word: &[char], i: usize) -> bool {
    match word[i] {
        'a' | 'e' | 'i' | 'o' | 'u' => true,
        'y' => i > 0 && !is_vowel(word, i - 1),
        _ => false,
    }
}

fn has_vowel(word: &[char]) -> bool {
    (0..word.len()).any(|i| is_vowel(word, i))
}

/// Number of vowel-consonant transitions (the Porter measure).
fn measure(word: &[char]) -> usize {
    let mut m = 0;
    let mut prev_vowel = false;
    for i in 0..word.len() {
        let v = is_vowel(word, i);
        if prev_vowel && !v {
            m += 1;
        }
        prev_vowel = v;
    }
    m
}

/// Consonant-vowel-consonant ending whose last consonant is not w, x or y.
fn ends_cvc(word: &[char]) -> bool {
    let n = word.len();
    n >= 3
        && !is_vowel(word, n - 3)
        && is_vowel(word, n - 2)
        && !is_vowel(word, n - 1)
        && !matches!(word[n - 1], 'w' | 'x' | 'y')
}

fn ends_double_consonant(word: &[char]) -> bool {
    let n = word.len();
    n >= 2 && word[n - 1] == word[n - 2] && !is_vowel(word, n - 1)
}

/// Repair a stem left by removing -ing, -ed, -er or -est.
fn restore(stem: &[char], verbal: bool) -> String {
    let s: String = stem.iter().collect();
    if ends_double_consonant(stem) && !matches!(stem[stem.len() - 1], 'l' | 's' | 'z') {
        return stem[..stem.len() - 1].iter().collect();
    }
    if verbal && (s.ends_with("at") || s.ends_with("bl") || s.ends_with("iz")) {
        return s + "e";
    }
    if matches!(stem[stem.len() - 1], 'v' | 'c') || (measure(stem) == 1 && ends_cvc(stem)) {
        return s + "e";
    }
    s
}

fn step(word: &str) -> Option<String> {
    if word.contains('\'') || KEEP.contains(&word) {
        return None;
    }
    let chars: Vec<char> = word.chars().collect();
    let n = chars.len();
    let strip = |k: usize| -> &[char] { &chars[..n - k] };

    if n > 4 && word.ends_with("ies") {
        return Some(format!("{}y", strip(3).iter().collect::<String>()));
    }
    if word.ends_with("sses") {
        return Some(strip(2).iter().collect());
    }
    if n > 4 && ["xes", "ches", "shes", "zes"].iter().any(|s| word.ends_with(s)) {
        return Some(strip(2).iter().collect());
    }
    if n > 3 && word.ends_with('s') && !["ss", "us", "is", "'s"].iter().any(|s| word.ends_with(s)) {
        return Some(strip(1).iter().collect());
    }
    if n > 4 && word.ends_with("ied") {
        return Some(format!("{}y", strip(3).iter().collect::<String>()));
    }
    if n > 4 && word.ends_with("ier") {
        return Some(format!("{}y", strip(3).iter().collect::<String>()));
    }
    if n > 5 && word.ends_with("iest") {
        return Some(format!("{}y", strip(4).iter().collect::<String>()));
    }
    for (suffix, min_stem, verbal) in [("ing", 2, true), ("ed", 3, true), ("est", 3, false), ("er", 4, false)] {
        let k = suffix.len();
        if word.ends_with(suffix) && n >= k + min_stem {
            let stem = strip(k);
            if has_vowel(stem) {
                return Some(restore(stem, verbal));
            }
        }
    }
    None
}

/// Lowercased, punctuation-stripped, suffix-rule lemma. Contractions are
/// returned unchanged apart from case folding.
pub fn lemmatize(word: &str) -> String {
    let mut current = super::match_key(word);
    while let Some(next) = step(&current) {
        let next = super::match_key(&next);
        if next.is_empty() || next.len() >= current.len() {
            break;
        }
        current = next;
    }
    current
}

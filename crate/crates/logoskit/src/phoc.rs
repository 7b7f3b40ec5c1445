//! Pyramidal histogram of characters: a fixed-length binary descriptor of a
//! word built from character occupancy over nested region splits.
//!
//! Layout (604 bits total, level-major, region-minor, symbol-last):
//!
//! * unigram levels 2, 3, 4, 5 over the 36-symbol alphabet `[a-z0-9]`
//!   — (2+3+4+5)·36 = 504 bits;
//! * bigram level 2 over the fixed 50-bigram list [`BIGRAMS`]
//!   — 2·50 = 100 bits.
//!
//! A character at 0-based position `k` of an `n`-character filtered word
//! occupies the interval `[k/n, (k+1)/n]`; a bigram starting at `k` occupies
//! `[k/n, (k+2)/n]`. At pyramid level `L` the word splits into `L` equal
//! regions, and the symbol's bit for a region is set iff the overlap between
//! occupancy and region is at least half the occupancy length (ties count
//! as set). Input is lowercased first and characters outside `[a-z0-9]` are
//! dropped, so encoding is case-insensitive and the empty string maps to the
//! all-zero vector.

/// Unigram pyramid levels.
pub const UNIGRAM_LEVELS: [usize; 4] = [2, 3, 4, 5];
/// Alphabet for unigram bits: 'a'..='z' then '0'..='9'.
pub const ALPHABET_LEN: usize = 36;
/// Descriptor length in bits.
pub const PHOC_LEN: usize = (2 + 3 + 4 + 5) * ALPHABET_LEN + 2 * BIGRAMS.len();

/// The 50 bigrams carried by the descriptor, in bit order. The list is the
/// usual "50 most frequent English bigrams" constant; it is part of this
/// crate's format and never changes.
pub const BIGRAMS: [&str; 50] = [
    "th", "he", "in", "er", "an", "re", "es", "on", "st", "nt", "en", "at", "ed", "nd", "to",
    "or", "ea", "ti", "ar", "te", "ng", "al", "it", "as", "is", "ha", "et", "se", "ou", "of",
    "le", "sa", "ve", "ro", "ra", "ri", "hi", "ne", "me", "de", "co", "ta", "ec", "si", "ll",
    "so", "na", "li", "la", "el",
];

/// The descriptor: a fixed-length bit vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhocVector {
    pub bits: Vec<bool>,
}

impl PhocVector {
    pub fn set_indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Bits as 0.0/1.0, the form consumed by feature fusion.
    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

fn symbol_index(c: char) -> Option<usize> {
    match c {
        'a'..='z' => Some(c as usize - 'a' as usize),
        '0'..='9' => Some(26 + c as usize - '0' as usize),
        _ => None,
    }
}

fn bigram_index(pair: &str) -> Option<usize> {
    BIGRAMS.iter().position(|&b| b == pair)
}

/// Overlap rule shared by unigram and bigram bits: membership of an
/// occupancy interval in a region, with ties counted as inside.
fn occupies(occ_lo: f64, occ_hi: f64, region_lo: f64, region_hi: f64) -> bool {
    let overlap = (occ_hi.min(region_hi) - occ_lo.max(region_lo)).max(0.0);
    overlap + 1e-12 >= 0.5 * (occ_hi - occ_lo)
}

/// Encode a word. Arbitrary input is accepted; characters outside the
/// alphabet are ignored after lowercasing.
pub fn phoc_encode(word: &str) -> PhocVector {
    let filtered: Vec<usize> = word
        .to_lowercase()
        .chars()
        .filter_map(symbol_index)
        .collect();
    let mut bits = vec![false; PHOC_LEN];
    let n = filtered.len();
    if n == 0 {
        return PhocVector { bits };
    }

    let mut level_base = 0usize;
    for &level in &UNIGRAM_LEVELS {
        for (k, &sym) in filtered.iter().enumerate() {
            let occ_lo = k as f64 / n as f64;
            let occ_hi = (k + 1) as f64 / n as f64;
            for region in 0..level {
                let r_lo = region as f64 / level as f64;
                let r_hi = (region + 1) as f64 / level as f64;
                if occupies(occ_lo, occ_hi, r_lo, r_hi) {
                    bits[level_base + region * ALPHABET_LEN + sym] = true;
                }
            }
        }
        level_base += level * ALPHABET_LEN;
    }

    // Bigram bits: consecutive symbol pairs of the filtered word, matched
    // against the fixed list (alphabetic pairs only by construction of the
    // list), at level 2.
    let lower: Vec<char> = word.to_lowercase().chars().filter(|c| symbol_index(*c).is_some()).collect();
    for k in 0..n.saturating_sub(1) {
        let pair: String = [lower[k], lower[k + 1]].iter().collect();
        if let Some(bi) = bigram_index(&pair) {
            let occ_lo = k as f64 / n as f64;
            let occ_hi = (k + 2) as f64 / n as f64;
            for region in 0..2 {
                let r_lo = region as f64 / 2.0;
                let r_hi = (region + 1) as f64 / 2.0;
                if occupies(occ_lo, occ_hi, r_lo, r_hi) {
                    bits[level_base + region * BIGRAMS.len() + bi] = true;
                }
            }
        }
    }

    PhocVector { bits }
}

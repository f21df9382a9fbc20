//! License plate OCR error model and the confusing-character pipeline.
//!
//! The flow is: accumulate a [`ConfusionTable`] from (truth, observed)
//! readings, derive the set of confusable character pairs at a threshold,
//! fold the pairs into a [`ConversionTable`] that maps each confusable
//! character to a class token `#k`, and hash the canonicalized plate into a
//! 64-bit vehicle id. Two plates that differ only by recorded confusions
//! canonicalize (and therefore hash) identically.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default pairing threshold.
pub const DEFAULT_PAIR_THRESHOLD: f64 = 0.2;

/// Character-level OCR outcome counts: `counts[truth][observed]`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfusionTable {
    counts: BTreeMap<char, BTreeMap<char, u64>>,
}

// Reference recognition counts over 117 seven-character simulator plates.
const REFERENCE_COUNTS: &[(char, &[(char, u64)])] = &[
    ('0', &[('0', 20), ('O', 13)]),
    ('1', &[('1', 42), ('T', 1), ('E', 1), ('I', 6)]),
    ('2', &[('2', 40), ('Z', 4)]),
    ('3', &[('3', 39), ('L', 1), ('6', 1)]),
    ('4', &[('4', 50)]),
    ('5', &[('5', 39), ('S', 2)]),
    ('6', &[('6', 30), ('W', 1), ('3', 1), ('G', 2)]),
    ('7', &[('7', 62), ('A', 1), ('T', 2)]),
    ('8', &[('8', 66), ('B', 3)]),
    ('9', &[('9', 40)]),
    ('A', &[('A', 19)]),
    ('B', &[('B', 12), ('L', 1), ('9', 1)]),
    ('C', &[('C', 14)]),
    ('D', &[('D', 5), ('0', 2)]),
    ('E', &[('E', 21), ('C', 1)]),
    ('F', &[('F', 8)]),
    ('G', &[('G', 7)]),
    ('H', &[('H', 16)]),
    ('I', &[('I', 12), ('1', 4)]),
    ('J', &[('J', 12)]),
    ('K', &[('K', 17)]),
    ('L', &[('L', 20)]),
    ('M', &[('M', 18), ('9', 1), ('P', 1), ('H', 1)]),
    ('N', &[('N', 31)]),
    ('O', &[('O', 8), ('0', 11)]),
    ('P', &[('P', 8), ('M', 1)]),
    ('Q', &[('Q', 1), ('0', 2)]),
    ('R', &[('R', 22)]),
    ('S', &[('S', 2), ('5', 7)]),
    ('T', &[('T', 13), ('7', 1)]),
    ('U', &[('U', 17)]),
    ('V', &[('V', 10), ('W', 1)]),
    ('W', &[('W', 4), ('M', 1)]),
    ('X', &[('X', 7)]),
    ('Y', &[('Y', 9)]),
    ('Z', &[('Z', 3)]),
];

impl ConfusionTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// The measured reference table for the 36-character plate alphabet.
    pub fn reference() -> Self {
        let mut t = Self::new();
        for &(truth, row) in REFERENCE_COUNTS {
            for &(observed, n) in row {
                t.add(truth, observed, n);
            }
        }
        t
    }

    pub fn add(&mut self, truth: char, observed: char, n: u64) {
        *self.counts.entry(truth).or_default().entry(observed).or_insert(0) += n;
    }

    pub fn count(&self, truth: char, observed: char) -> u64 {
        self.counts.get(&truth).and_then(|r| r.get(&observed)).copied().unwrap_or(0)
    }

    /// Number of times `truth` appeared in ground truth.
    pub fn row_total(&self, truth: char) -> u64 {
        self.counts.get(&truth).map_or(0, |r| r.values().sum())
    }

    /// Probability of `c1` being recognized as `c2`, normalized by the
    /// ground-truth occurrences of `c1`.
    pub fn err(&self, c1: char, c2: char) -> f64 {
        let total = self.row_total(c1);
        if total == 0 {
            0.0
        } else {
            self.count(c1, c2) as f64 / total as f64
        }
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Ground-truth characters with at least one recorded reading.
    pub fn chars(&self) -> impl Iterator<Item = char> + '_ {
        self.counts.keys().copied()
    }

    pub fn row(&self, truth: char) -> Option<&BTreeMap<char, u64>> {
        self.counts.get(&truth)
    }
}

/// Accumulates positional character counts from (truth, observed) readings.
pub fn build_confusion_table<S: AsRef<str>>(readings: &[(S, S)]) -> Result<ConfusionTable> {
    let mut table = ConfusionTable::new();
    for (index, (truth, observed)) in readings.iter().enumerate() {
        let truth: Vec<char> = truth.as_ref().chars().collect();
        let observed: Vec<char> = observed.as_ref().chars().collect();
        if truth.len() != observed.len() {
            return Err(Error::LengthMismatch { index, truth: truth.len(), observed: observed.len() });
        }
        for (t, o) in truth.into_iter().zip(observed) {
            table.add(t, o, 1);
        }
    }
    Ok(table)
}

/// A generative per-character OCR channel.
#[derive(Debug, Clone)]
pub struct OcrChannel {
    // Cumulative distribution over observed characters, per truth character.
    rows: BTreeMap<char, Vec<(char, f64)>>,
}

impl OcrChannel {
    /// Uses each row of `table` as the observed-character distribution.
    pub fn from_table(table: &ConfusionTable) -> Self {
        let rows = table
            .counts
            .iter()
            .filter_map(|(&truth, row)| {
                let total: u64 = row.values().sum();
                if total == 0 {
                    return None;
                }
                let mut acc = 0u64;
                let cdf = row
                    .iter()
                    .map(|(&obs, &n)| {
                        acc += n;
                        (obs, acc as f64 / total as f64)
                    })
                    .collect();
                Some((truth, cdf))
            })
            .collect();
        Self { rows }
    }

    /// A channel that reproduces every character of `alphabet` verbatim.
    pub fn identity(alphabet: impl IntoIterator<Item = char>) -> Self {
        Self { rows: alphabet.into_iter().map(|c| (c, vec![(c, 1.0)])).collect() }
    }

    pub fn reference() -> Self {
        Self::from_table(&ConfusionTable::reference())
    }

    pub fn supports(&self, c: char) -> bool {
        self.rows.contains_key(&c)
    }
}

/// Passes `plate` through the channel, replacing each character
/// independently by a draw from its observed-character distribution.
pub fn sample_ocr<R: Rng + ?Sized>(plate: &str, channel: &OcrChannel, rng: &mut R) -> Result<String> {
    plate
        .chars()
        .map(|c| {
            let cdf = channel.rows.get(&c).ok_or(Error::UnsupportedChar(c))?;
            let u: f64 = rng.gen();
            let picked =
                cdf.iter().find(|&&(_, p)| u < p).or_else(|| cdf.last()).map(|&(o, _)| o).expect("non-empty row");
            Ok(picked)
        })
        .collect()
}

/// Unordered confusable character pairs, stored as (smaller, larger).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CharPairSet {
    pairs: BTreeSet<(char, char)>,
}

impl CharPairSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts an unordered pair. Identity pairs are ignored.
    pub fn insert(&mut self, a: char, b: char) -> bool {
        if a == b {
            return false;
        }
        self.pairs.insert((a.min(b), a.max(b)))
    }

    pub fn contains(&self, a: char, b: char) -> bool {
        self.pairs.contains(&(a.min(b), a.max(b)))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Pairs sorted lexicographically by (smaller char, larger char).
    pub fn ordered(&self) -> Vec<(char, char)> {
        self.pairs.iter().copied().collect()
    }
}

/// All pairs where either direction's error rate exceeds `threshold`.
pub fn derive_char_pairs(table: &ConfusionTable, threshold: f64) -> Result<CharPairSet> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("pair threshold must lie in (0, 1), got {threshold}")));
    }
    let mut set = CharPairSet::new();
    for (&truth, row) in &table.counts {
        for &observed in row.keys() {
            if truth != observed && table.err(truth, observed) > threshold {
                set.insert(truth, observed);
            }
        }
    }
    Ok(set)
}

/// Map from confusable characters to class indices (rendered `#k`).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversionTable {
    entries: BTreeMap<char, u32>,
}

impl ConversionTable {
    pub fn empty() -> Self {
        Self::default()
    }

    /// The table derived from the reference confusion counts at `threshold`.
    pub fn reference(threshold: f64) -> Result<Self> {
        let pairs = derive_char_pairs(&ConfusionTable::reference(), threshold)?;
        Ok(build_conversion_table(&pairs.ordered()))
    }

    pub fn get(&self, c: char) -> Option<u32> {
        self.entries.get(&c).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (char, u32)> + '_ {
        self.entries.iter().map(|(&c, &k)| (c, k))
    }

    /// Class values in use, ascending.
    pub fn classes(&self) -> BTreeSet<u32> {
        self.entries.values().copied().collect()
    }

    /// Sorted `char -> "#k"` view, the on-disk `cct.json` layout.
    pub fn to_json_map(&self) -> BTreeMap<String, String> {
        self.entries.iter().map(|(c, k)| (c.to_string(), format!("#{k}"))).collect()
    }

    pub fn from_json_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (key, value) in map {
            let mut chars = key.chars();
            let (Some(c), None) = (chars.next(), chars.next()) else {
                return Err(Error::Config(format!("conversion key {key:?} is not one character")));
            };
            let k = value
                .strip_prefix('#')
                .and_then(|d| d.parse::<u32>().ok())
                .filter(|&k| k > 0)
                .ok_or_else(|| Error::Config(format!("conversion value {value:?} is not #k")))?;
            entries.insert(c, k);
        }
        Ok(Self { entries })
    }
}

/// Builds the conversion table by walking `pairs` in the given order.
///
/// If the first member is already keyed the second takes its value,
/// otherwise if the second is keyed the first takes its value, otherwise
/// both receive the next fresh value. A pair bridging two existing classes
/// reassigns the second member to the first member's class; classes are not
/// union-merged.
pub fn build_conversion_table(pairs: &[(char, char)]) -> ConversionTable {
    let mut entries = BTreeMap::new();
    let mut next = 1u32;
    for &(c1, c2) in pairs {
        if let Some(&v) = entries.get(&c1) {
            entries.insert(c2, v);
        } else if let Some(&v) = entries.get(&c2) {
            entries.insert(c1, v);
        } else {
            entries.insert(c1, next);
            entries.insert(c2, next);
            next += 1;
        }
    }
    ConversionTable { entries }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PlateToken {
    Raw(char),
    Class(u32),
}

/// A plate with confusable characters replaced by class tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CanonicalPlate {
    pub tokens: Vec<PlateToken>,
}

impl CanonicalPlate {
    /// Re-reads a rendered canonical plate. `#` followed by digits is read
    /// as the longest class value present in `cct`; everything else is
    /// canonicalized as a plain character.
    pub fn parse_rendered(rendered: &str, cct: &ConversionTable) -> Self {
        let classes = cct.classes();
        let chars: Vec<char> = rendered.chars().collect();
        let mut tokens = Vec::with_capacity(chars.len());
        let mut i = 0;
        while i < chars.len() {
            if chars[i] == '#' {
                let digits: String = chars[i + 1..].iter().take_while(|c| c.is_ascii_digit()).collect();
                let matched = (1..=digits.len()).rev().find_map(|n| {
                    let k: u32 = digits[..n].parse().ok()?;
                    classes.contains(&k).then_some((k, n))
                });
                if let Some((k, n)) = matched {
                    tokens.push(PlateToken::Class(k));
                    i += 1 + n;
                    continue;
                }
            }
            tokens.push(match cct.get(chars[i]) {
                Some(k) => PlateToken::Class(k),
                None => PlateToken::Raw(chars[i]),
            });
            i += 1;
        }
        Self { tokens }
    }
}

impl fmt::Display for CanonicalPlate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tokens {
            match t {
                PlateToken::Raw(c) => write!(f, "{c}")?,
                PlateToken::Class(k) => write!(f, "#{k}")?,
            }
        }
        Ok(())
    }
}

pub fn canonicalize_plate(plate: &str, cct: &ConversionTable) -> CanonicalPlate {
    CanonicalPlate {
        tokens: plate
            .chars()
            .map(|c| match cct.get(c) {
                Some(k) => PlateToken::Class(k),
                None => PlateToken::Raw(c),
            })
            .collect(),
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const TOKEN_SEPARATOR: u8 = 0x1f;

/// 64-bit FNV-1a over a byte slice.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    fnv1a64_extend(FNV_OFFSET, bytes)
}

fn fnv1a64_extend(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Vehicle id: FNV-1a over the token bytes, tokens separated by 0x1F.
pub fn plate_id(canon: &CanonicalPlate) -> u64 {
    let mut h = FNV_OFFSET;
    let mut buf = [0u8; 4];
    for (i, token) in canon.tokens.iter().enumerate() {
        if i > 0 {
            h = fnv1a64_extend(h, &[TOKEN_SEPARATOR]);
        }
        h = match token {
            PlateToken::Raw(c) => fnv1a64_extend(h, c.encode_utf8(&mut buf).as_bytes()),
            PlateToken::Class(k) => fnv1a64_extend(h, format!("#{k}").as_bytes()),
        };
    }
    h
}

/// The plate alphabet: digits then upper-case letters.
pub fn plate_alphabet() -> impl Iterator<Item = char> {
    ('0'..='9').chain('A'..='Z')
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table3() -> ConversionTable {
        ConversionTable::reference(DEFAULT_PAIR_THRESHOLD).unwrap()
    }

    #[test]
    fn reference_table_is_117_seven_char_plates() {
        let t = ConfusionTable::reference();
        let total: u64 = t.chars().map(|c| t.row_total(c)).sum();
        assert_eq!(total, 117 * 7);
        assert_eq!(t.row_total('I'), 16);
        assert_eq!(t.count('I', '1'), 4);
    }

    #[test]
    fn confusion_counts_from_readings() {
        let t = build_confusion_table(&[("AB", "AB")]).unwrap();
        assert_eq!(t.count('A', 'A'), 1);
        assert_eq!(t.count('B', 'B'), 1);
        let t = build_confusion_table(&[("I1", "11")]).unwrap();
        assert_eq!(t.count('I', '1'), 1);
        assert_eq!(t.count('1', '1'), 1);
        assert_eq!(t.row_total('I'), 1);
    }

    #[test]
    fn confusion_length_mismatch_is_rejected() {
        let err = build_confusion_table(&[("AB", "AB"), ("ABC", "AB")]).unwrap_err();
        assert!(matches!(err, Error::LengthMismatch { index: 1, truth: 3, observed: 2 }));
    }

    #[test]
    fn pairs_from_reference_table() {
        let cp = derive_char_pairs(&ConfusionTable::reference(), 0.2).unwrap();
        assert!(cp.contains('I', '1'));
        for (a, b) in [('0', 'O'), ('D', '0'), ('Q', '0'), ('S', '5')] {
            assert!(cp.contains(a, b), "missing ({a},{b})");
        }
        // W->M is exactly 0.2, which does not exceed the threshold.
        assert!(!cp.contains('W', 'M'));
        assert_eq!(cp.len(), 5);
        assert!(derive_char_pairs(&ConfusionTable::reference(), 0.99).unwrap().is_empty());
        assert!(derive_char_pairs(&ConfusionTable::new(), 0.2).unwrap().is_empty());
        assert!(derive_char_pairs(&ConfusionTable::new(), 1.0).is_err());
    }

    #[test]
    fn algorithm_order_reproduces_reference_classes() {
        let cct = build_conversion_table(&[('0', 'O'), ('0', 'D'), ('0', 'Q'), ('1', 'I'), ('5', 'S')]);
        for c in ['0', 'O', 'D', 'Q'] {
            assert_eq!(cct.get(c), Some(1));
        }
        assert_eq!(cct.get('1'), Some(2));
        assert_eq!(cct.get('I'), Some(2));
        assert_eq!(cct.get('5'), Some(3));
        assert_eq!(cct.get('S'), Some(3));
        assert_eq!(cct, table3());
    }

    #[test]
    fn chained_pairs_share_a_class() {
        let cct = build_conversion_table(&[('A', 'B'), ('B', 'C')]);
        assert_eq!([cct.get('A'), cct.get('B'), cct.get('C')], [Some(1); 3]);
        assert!(build_conversion_table(&[]).is_empty());
    }

    #[test]
    fn bridging_pair_reassigns_second_member() {
        let cct = build_conversion_table(&[('A', 'B'), ('C', 'D'), ('B', 'C')]);
        assert_eq!(cct.get('C'), Some(1));
        assert_eq!(cct.get('D'), Some(2));
    }

    #[test]
    fn canonical_forms() {
        let cct = table3();
        let a = canonicalize_plate("5CRD321", &cct);
        let b = canonicalize_plate("SCRO32I", &cct);
        assert_eq!(a.to_string(), "#3CR#132#2");
        assert_eq!(a, b);
        assert_eq!(plate_id(&a), plate_id(&b));
        let one = canonicalize_plate("1ABCEF", &cct);
        let two = canonicalize_plate("2ABCEF", &cct);
        assert_ne!(one, two);
        assert_ne!(plate_id(&one), plate_id(&two));
    }

    #[test]
    fn hash_of_empty_plate_is_offset_basis() {
        assert_eq!(plate_id(&CanonicalPlate { tokens: vec![] }), 0xcbf2_9ce4_8422_2325);
        // Known FNV-1a test vector.
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn ocr_identity_channel() {
        let ch = OcrChannel::identity(plate_alphabet());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_ocr("5CRD321", &ch, &mut rng).unwrap(), "5CRD321");
    }

    #[test]
    fn ocr_rejects_unknown_characters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = sample_ocr("AB-1", &OcrChannel::reference(), &mut rng).unwrap_err();
        assert!(matches!(err, Error::UnsupportedChar('-')));
    }

    #[test]
    fn ocr_reference_rates() {
        let ch = OcrChannel::reference();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let s_as_5 = (0..n).filter(|_| sample_ocr("S", &ch, &mut rng).unwrap() == "5").count() as f64 / n as f64;
        assert!((s_as_5 - 7.0 / 9.0).abs() < 0.02, "{s_as_5}");
        let o_as_0 = (0..n).filter(|_| sample_ocr("O", &ch, &mut rng).unwrap() == "0").count() as f64 / n as f64;
        assert!((o_as_0 - 11.0 / 19.0).abs() < 0.02, "{o_as_0}");
    }

    #[test]
    fn rendered_form_reparses() {
        let cct = table3();
        let canon = canonicalize_plate("5CRD321", &cct);
        assert_eq!(CanonicalPlate::parse_rendered(&canon.to_string(), &cct), canon);
    }

    #[test]
    fn json_map_round_trip() {
        let cct = table3();
        let map = cct.to_json_map();
        assert_eq!(map.get("D").map(String::as_str), Some("#1"));
        assert_eq!(ConversionTable::from_json_map(&map).unwrap(), cct);
    }
}

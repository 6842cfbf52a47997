//! Residue alphabets, fixed-length sequences and Hamming identity.

use std::fmt;

use crate::error::{Error, Result};

const HP2_SYMBOLS: [char; 2] = ['H', 'P'];

const AA20_SYMBOLS: [char; 20] = [
    'A', 'C', 'D', 'E', 'F', 'G', 'H', 'I', 'K', 'L', 'M', 'N', 'P', 'Q', 'R', 'S', 'T', 'V', 'W',
    'Y',
];

/// Kyte–Doolittle hydropathy, indexed like [`AA20_SYMBOLS`]. A residue is
/// hydrophobic (H) iff its value is strictly positive.
const KYTE_DOOLITTLE: [f64; 20] = [
    1.8, 2.5, -3.5, -3.5, 2.8, -0.4, -3.2, 4.5, -3.9, 3.8, 1.9, -3.5, -1.6, -3.5, -4.5, -0.8, -0.7,
    4.2, -0.9, -1.3,
];

/// Token index of `H` in the HP2 alphabet.
pub const HP_H: u8 = 0;
/// Token index of `P` in the HP2 alphabet.
pub const HP_P: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Alphabet {
    /// Two-letter hydrophobic/polar alphabet.
    Hp2,
    /// The twenty standard amino acids.
    Aa20,
}

impl Alphabet {
    pub fn symbols(self) -> &'static [char] {
        match self {
            Alphabet::Hp2 => &HP2_SYMBOLS,
            Alphabet::Aa20 => &AA20_SYMBOLS,
        }
    }

    pub fn size(self) -> usize {
        self.symbols().len()
    }

    pub fn symbol(self, token: u8) -> char {
        self.symbols()[token as usize]
    }

    pub fn index_of(self, c: char) -> Option<u8> {
        self.symbols().iter().position(|&s| s == c).map(|i| i as u8)
    }

    /// Hydrophobic flag for a token.
    pub fn is_hydrophobic(self, token: u8) -> bool {
        match self {
            Alphabet::Hp2 => token == HP_H,
            Alphabet::Aa20 => KYTE_DOOLITTLE[token as usize] > 0.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Alphabet::Hp2 => "HP2",
            Alphabet::Aa20 => "AA20",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name.to_ascii_uppercase().as_str() {
            "HP2" => Some(Alphabet::Hp2),
            "AA20" => Some(Alphabet::Aa20),
            _ => None,
        }
    }
}

impl fmt::Display for Alphabet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A fixed-length residue string. Tokens are indices into the alphabet, so
/// token order matches the lexicographic order of the residue strings.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Sequence {
    alphabet: Alphabet,
    tokens: Vec<u8>,
}

impl Sequence {
    pub fn new(alphabet: Alphabet, tokens: Vec<u8>) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::usage(format!(
                "sequence length {} is below the minimum of 2",
                tokens.len()
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= alphabet.size()) {
            return Err(Error::usage(format!(
                "token {t} out of range for alphabet {alphabet}"
            )));
        }
        Ok(Sequence { alphabet, tokens })
    }

    /// Parses a residue string such as `"HPPH"`.
    pub fn parse(alphabet: Alphabet, s: &str) -> Result<Self> {
        let tokens = s
            .chars()
            .map(|c| {
                alphabet.index_of(c).ok_or_else(|| {
                    Error::usage(format!("residue '{c}' is not in alphabet {alphabet}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Sequence::new(alphabet, tokens)
    }

    pub fn alphabet(&self) -> Alphabet {
        self.alphabet
    }

    pub fn tokens(&self) -> &[u8] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn reversed(&self) -> Sequence {
        let mut tokens = self.tokens.clone();
        tokens.reverse();
        Sequence {
            alphabet: self.alphabet,
            tokens,
        }
    }

    /// Hydrophobic flags per residue.
    pub fn hydrophobic_mask(&self) -> Vec<bool> {
        self.tokens
            .iter()
            .map(|&t| self.alphabet.is_hydrophobic(t))
            .collect()
    }
}

impl fmt::Display for Sequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &t in &self.tokens {
            write!(f, "{}", self.alphabet.symbol(t))?;
        }
        Ok(())
    }
}

fn check_comparable(a: &Sequence, b: &Sequence) -> Result<()> {
    if a.alphabet != b.alphabet {
        return Err(Error::usage(format!(
            "alphabet mismatch: {} vs {}",
            a.alphabet, b.alphabet
        )));
    }
    if a.len() != b.len() {
        return Err(Error::usage(format!(
            "length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Fraction of positions at which `a` and `b` carry the same residue.
pub fn hamming_identity(a: &Sequence, b: &Sequence) -> Result<f64> {
    check_comparable(a, b)?;
    let matches = a
        .tokens
        .iter()
        .zip(&b.tokens)
        .filter(|(x, y)| x == y)
        .count();
    Ok(matches as f64 / a.len() as f64)
}

/// Highest identity between `q` and any member of `refs`.
pub fn max_identity_to_set<'a, I>(q: &Sequence, refs: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a Sequence>,
{
    let mut best: Option<f64> = None;
    for r in refs {
        let id = hamming_identity(q, r)?;
        best = Some(best.map_or(id, |b: f64| b.max(id)));
        if id == 1.0 {
            break;
        }
    }
    best.ok_or_else(|| Error::usage("max_identity_to_set needs a nonempty reference set"))
}

/// Maps any sequence onto the HP2 alphabet via the hydrophobicity table.
pub fn to_hp_pattern(s: &Sequence) -> Sequence {
    if s.alphabet == Alphabet::Hp2 {
        return s.clone();
    }
    let tokens = s
        .tokens
        .iter()
        .map(|&t| if s.alphabet.is_hydrophobic(t) { HP_H } else { HP_P })
        .collect();
    Sequence {
        alphabet: Alphabet::Hp2,
        tokens,
    }
}

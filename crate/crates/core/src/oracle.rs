//! Exact 2D square-lattice HP folding oracle.
//!
//! Conformations are self-avoiding walks in canonical form: the first step is
//! `+x` and the first turn, if any, is `+y`. This quotients out the eight
//! lattice symmetries, so every canonical walk with a turn stands for eight
//! raw walks and the straight walk stands for four.
//!
//! Energy is `-1` per topological H–H contact (residues `i`, `j` with
//! `|i - j| > 1` on adjacent sites). [`LatticeOracle`] finds the ground state by
//! depth-first search with a contact upper bound; ties are never pruned so the
//! ground-state degeneracy is exact.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, RwLock};

use crate::error::{Error, Result};
use crate::seqcore::{to_hp_pattern, Sequence};

/// Default maximum chain length for exhaustive folding.
pub const DEFAULT_L_MAX: usize = 14;
/// Hard ceiling on `l_max`, whatever the configuration says.
pub const HARD_L_MAX: usize = 18;

/// One lattice embedding of a chain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conformation {
    pub coords: Vec<(i32, i32)>,
}

impl Conformation {
    /// Unit steps between consecutive sites and no site visited twice.
    pub fn is_self_avoiding_walk(&self) -> bool {
        let steps_ok = self.coords.windows(2).all(|w| {
            let (a, b) = (w[0], w[1]);
            (a.0 - b.0).abs() + (a.1 - b.1).abs() == 1
        });
        let mut seen = self.coords.clone();
        seen.sort_unstable();
        seen.dedup();
        steps_ok && seen.len() == self.coords.len()
    }

    /// First step `+x`, first turn (if any) `+y`.
    pub fn is_canonical(&self) -> bool {
        if self.coords.len() < 2 {
            return true;
        }
        let step = |i: usize| {
            let (a, b) = (self.coords[i], self.coords[i + 1]);
            (b.0 - a.0, b.1 - a.1)
        };
        if step(0) != (1, 0) {
            return false;
        }
        for i in 1..self.coords.len() - 1 {
            let s = step(i);
            if s != (1, 0) {
                return s == (0, 1);
            }
        }
        true
    }

    /// Number of non-consecutive hydrophobic pairs on adjacent sites.
    pub fn hh_contacts(&self, hydrophobic: &[bool]) -> usize {
        let n = self.coords.len();
        let mut contacts = 0;
        for i in 0..n {
            for j in i + 2..n {
                if hydrophobic[i] && hydrophobic[j] {
                    let (a, b) = (self.coords[i], self.coords[j]);
                    if (a.0 - b.0).abs() + (a.1 - b.1).abs() == 1 {
                        contacts += 1;
                    }
                }
            }
        }
        contacts
    }
}

/// Ground-state summary of a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FoldReport {
    /// Ground-state energy, `<= 0`.
    pub e_min: i32,
    /// Number of canonical conformations attaining `e_min`.
    pub degeneracy: u64,
    /// Number of canonical conformations of this chain length.
    pub n_conf: u64,
    pub length: usize,
}

impl FoldReport {
    pub fn e_per_res(&self) -> f64 {
        self.e_min as f64 / self.length as f64
    }
}

/// Energy oracle interface. Implementations must be deterministic.
pub trait EnergyOracle: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, s: &Sequence) -> Result<FoldReport>;
}

/// Stability criterion used for foldability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FoldCriteria {
    pub g_max: u64,
    /// Fixed energy threshold; `None` uses `-floor(L/5) - 1`.
    pub e_thresh: Option<i32>,
}

impl Default for FoldCriteria {
    fn default() -> Self {
        FoldCriteria {
            g_max: 4,
            e_thresh: None,
        }
    }
}

impl FoldCriteria {
    pub fn energy_threshold(&self, length: usize) -> i32 {
        self.e_thresh.unwrap_or(-((length / 5) as i32) - 1)
    }
}

/// A report counts as folded when its ground state is both near-unique and deep enough.
pub fn is_foldable(report: &FoldReport, length: usize, criteria: &FoldCriteria) -> bool {
    report.degeneracy <= criteria.g_max && report.e_min <= criteria.energy_threshold(length)
}

const DIRS: [(i32, i32); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];

/// Occupancy grid large enough for any walk of `length` sites starting at its centre.
struct Grid {
    width: i32,
    cells: Vec<u8>,
}

impl Grid {
    fn new(length: usize) -> Self {
        let width = 2 * length as i32 + 1;
        Grid {
            width,
            cells: vec![0; (width * width) as usize],
        }
    }

    fn centre(&self) -> i32 {
        (self.width / 2) * self.width + self.width / 2
    }

    fn offset(&self, dir: usize) -> i32 {
        let (dx, dy) = DIRS[dir];
        dx + dy * self.width
    }
}

fn check_length(length: usize, l_max: usize) -> Result<()> {
    let cap = l_max.min(HARD_L_MAX);
    if length > cap {
        return Err(Error::Capability(format!(
            "chain length {length} exceeds the lattice enumeration limit of {cap}"
        )));
    }
    if length < 2 {
        return Err(Error::usage(format!("chain length {length} is below 2")));
    }
    Ok(())
}

/// Counts canonical self-avoiding walks with `length` sites.
pub fn enumerate_saws(length: usize, l_max: usize) -> Result<u64> {
    check_length(length, l_max)?;
    let mut grid = Grid::new(length);
    let start = grid.centre();
    let second = start + grid.offset(0);
    grid.cells[start as usize] = 1;
    grid.cells[second as usize] = 2;
    let mut count = 0;
    count_walks(&mut grid, second, 2, length, false, &mut count);
    Ok(count)
}

fn count_walks(grid: &mut Grid, pos: i32, placed: usize, length: usize, turned: bool, count: &mut u64) {
    if placed == length {
        *count += 1;
        return;
    }
    for dir in 0..4 {
        if !turned && dir > 1 {
            break;
        }
        let next = pos + grid.offset(dir);
        if grid.cells[next as usize] != 0 {
            continue;
        }
        grid.cells[next as usize] = 1;
        count_walks(grid, next, placed + 1, length, turned || dir == 1, count);
        grid.cells[next as usize] = 0;
    }
}

/// Raw (unreduced) walk count implied by a canonical count.
pub fn raw_walk_count(canonical: u64) -> u64 {
    // the straight walk has 4 images, every other canonical walk 8
    8 * (canonical - 1) + 4
}

struct FoldSearch<'a> {
    grid: Grid,
    hydrophobic: &'a [bool],
    /// Max contacts still obtainable from residues after index `i`.
    remaining: Vec<usize>,
    best: usize,
    degeneracy: u64,
}

impl FoldSearch<'_> {
    fn run(&mut self, pos: i32, placed: usize, contacts: usize, turned: bool) {
        let n = self.hydrophobic.len();
        if placed == n {
            if contacts > self.best {
                self.best = contacts;
                self.degeneracy = 1;
            } else if contacts == self.best {
                self.degeneracy += 1;
            }
            return;
        }
        // placed residues are 0..placed; residue `placed` goes next
        if contacts + self.remaining[placed - 1] < self.best {
            return;
        }
        for dir in 0..4 {
            if !turned && dir > 1 {
                break;
            }
            let next = pos + self.grid.offset(dir);
            if self.grid.cells[next as usize] != 0 {
                continue;
            }
            let mut gained = 0;
            if self.hydrophobic[placed] {
                for d in 0..4 {
                    let cell = self.grid.cells[(next + self.grid.offset(d)) as usize];
                    if cell != 0 {
                        let other = cell as usize - 1;
                        if other + 1 < placed && self.hydrophobic[other] {
                            gained += 1;
                        }
                    }
                }
            }
            self.grid.cells[next as usize] = placed as u8 + 1;
            self.run(next, placed + 1, contacts + gained, turned || dir == 1);
            self.grid.cells[next as usize] = 0;
        }
    }
}

/// Exhaustive ground-state search for a hydrophobicity pattern.
///
/// Returns `(max_contacts, degeneracy)`.
fn ground_state(hydrophobic: &[bool]) -> (usize, u64) {
    let n = hydrophobic.len();
    let mut remaining = vec![0usize; n];
    for i in (0..n.saturating_sub(1)).rev() {
        let k = i + 1;
        let cap = if !hydrophobic[k] {
            0
        } else if k == n - 1 {
            3
        } else {
            2
        };
        remaining[i] = cap + remaining.get(k).copied().unwrap_or(0);
    }
    let mut search = FoldSearch {
        grid: Grid::new(n),
        hydrophobic,
        remaining,
        best: 0,
        degeneracy: 0,
    };
    let start = search.grid.centre();
    let second = start + search.grid.offset(0);
    search.grid.cells[start as usize] = 1;
    search.grid.cells[second as usize] = 2;
    search.run(second, 2, 0, false);
    (search.best, search.degeneracy)
}

/// Exact lattice oracle with an in-memory memo keyed by HP pattern.
pub struct LatticeOracle {
    l_max: usize,
    cache: RwLock<HashMap<String, FoldReport>>,
    saw_counts: Mutex<HashMap<usize, u64>>,
}

impl LatticeOracle {
    pub fn new(l_max: usize) -> Self {
        LatticeOracle {
            l_max: l_max.min(HARD_L_MAX),
            cache: RwLock::new(HashMap::new()),
            saw_counts: Mutex::new(HashMap::new()),
        }
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    fn n_conf(&self, length: usize) -> Result<u64> {
        if let Some(&n) = self.saw_counts.lock().unwrap().get(&length) {
            return Ok(n);
        }
        let n = enumerate_saws(length, self.l_max)?;
        self.saw_counts.lock().unwrap().insert(length, n);
        Ok(n)
    }

    /// Folds without consulting or filling the memo.
    pub fn fold_uncached(&self, s: &Sequence) -> Result<FoldReport> {
        check_length(s.len(), self.l_max)?;
        let hydrophobic = to_hp_pattern(s).hydrophobic_mask();
        let n_conf = self.n_conf(s.len())?;
        let h_count = hydrophobic.iter().filter(|&&h| h).count();
        let (contacts, degeneracy) = if h_count < 2 {
            (0, n_conf)
        } else {
            ground_state(&hydrophobic)
        };
        Ok(FoldReport {
            e_min: -(contacts as i32),
            degeneracy,
            n_conf,
            length: s.len(),
        })
    }

    pub fn fold(&self, s: &Sequence) -> Result<FoldReport> {
        let key = to_hp_pattern(s).to_string();
        if let Some(r) = self.cache.read().unwrap().get(&key) {
            return Ok(*r);
        }
        let report = self.fold_uncached(s)?;
        self.cache.write().unwrap().insert(key, report);
        Ok(report)
    }

    pub fn cached_len(&self) -> usize {
        self.cache.read().unwrap().len()
    }

    /// Loads `pattern,e_min,g,n_conf` records into the memo. A missing file is not an error.
    pub fn load_cache(&self, path: &Path) -> Result<usize> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(0),
            Err(e) => return Err(Error::io(path, e)),
        };
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.display().to_string(),
            line,
            message,
        };
        let mut loaded = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(parse_err(i + 1, format!("expected 4 fields, got {}", fields.len())));
            }
            let pattern = fields[0].to_string();
            if pattern.len() < 2 || !pattern.chars().all(|c| c == 'H' || c == 'P') {
                return Err(parse_err(i + 1, format!("bad HP pattern {pattern:?}")));
            }
            let num = |f: &str| {
                f.trim()
                    .parse::<i64>()
                    .map_err(|e| parse_err(i + 1, format!("bad number {f:?}: {e}")))
            };
            let report = FoldReport {
                e_min: num(fields[1])? as i32,
                degeneracy: num(fields[2])? as u64,
                n_conf: num(fields[3])? as u64,
                length: pattern.len(),
            };
            loaded.insert(pattern, report);
        }
        let n = loaded.len();
        self.cache.write().unwrap().extend(loaded);
        Ok(n)
    }

    /// Writes the memo, sorted by pattern.
    pub fn save_cache(&self, path: &Path) -> Result<()> {
        let cache = self.cache.read().unwrap();
        let mut keys: Vec<&String> = cache.keys().collect();
        keys.sort();
        let mut out = Vec::new();
        for k in keys {
            let r = cache[k];
            writeln!(out, "{k},{},{},{}", r.e_min, r.degeneracy, r.n_conf).unwrap();
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

impl EnergyOracle for LatticeOracle {
    fn name(&self) -> &str {
        "lattice"
    }

    fn score(&self, s: &Sequence) -> Result<FoldReport> {
        self.fold(s)
    }
}

/// Fast stand-in: minus the number of adjacent H,H pairs in the string.
#[derive(Debug, Default, Clone, Copy)]
pub struct SurrogateOracle;

pub fn surrogate_score(s: &Sequence) -> FoldReport {
    let h = to_hp_pattern(s).hydrophobic_mask();
    let pairs = h.windows(2).filter(|w| w[0] && w[1]).count();
    FoldReport {
        e_min: -(pairs as i32),
        degeneracy: 1,
        n_conf: 1,
        length: s.len(),
    }
}

impl EnergyOracle for SurrogateOracle {
    fn name(&self) -> &str {
        "surrogate"
    }

    fn score(&self, s: &Sequence) -> Result<FoldReport> {
        Ok(surrogate_score(s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqcore::Alphabet;

    fn hp(s: &str) -> Sequence {
        Sequence::parse(Alphabet::Hp2, s).unwrap()
    }

    #[test]
    fn saw_counts_small() {
        assert_eq!(enumerate_saws(2, 14).unwrap(), 1);
        assert_eq!(enumerate_saws(3, 14).unwrap(), 2);
        assert_eq!(raw_walk_count(enumerate_saws(2, 14).unwrap()), 4);
        assert_eq!(raw_walk_count(enumerate_saws(3, 14).unwrap()), 12);
        assert_eq!(raw_walk_count(enumerate_saws(4, 14).unwrap()), 36);
    }

    #[test]
    fn saw_limit_is_capability_error() {
        let err = enumerate_saws(15, 14).unwrap_err();
        assert!(matches!(err, Error::Capability(ref m) if m.contains("14")));
        let oracle = LatticeOracle::new(6);
        assert!(matches!(
            oracle.fold(&hp("HPHPHPH")),
            Err(Error::Capability(_))
        ));
    }

    #[test]
    fn fold_examples() {
        let oracle = LatticeOracle::new(DEFAULT_L_MAX);
        assert_eq!(oracle.fold(&hp("PPPP")).unwrap().e_min, 0);
        assert_eq!(oracle.fold(&hp("HH")).unwrap().e_min, 0);
        let r = oracle.fold(&hp("HPPH")).unwrap();
        assert_eq!((r.e_min, r.degeneracy, r.n_conf), (-1, 1, 5));
    }

    #[test]
    fn fewer_than_two_h_is_fully_degenerate() {
        let oracle = LatticeOracle::new(DEFAULT_L_MAX);
        let r = oracle.fold(&hp("PPHPPP")).unwrap();
        assert_eq!(r.e_min, 0);
        assert_eq!(r.degeneracy, r.n_conf);
    }

    #[test]
    fn foldability_examples() {
        let c = FoldCriteria::default();
        let unfolded = FoldReport {
            e_min: 0,
            degeneracy: 100,
            n_conf: 100,
            length: 12,
        };
        assert!(!is_foldable(&unfolded, 12, &c));
        let deep = FoldReport {
            e_min: -4,
            degeneracy: 1,
            n_conf: 15_037,
            length: 12,
        };
        assert_eq!(c.energy_threshold(12), -3);
        assert!(is_foldable(&deep, 12, &c));

        // HPPH: e_min = -1, g = 1; the default threshold at L=4 is -1
        let hpph = LatticeOracle::new(14).fold(&hp("HPPH")).unwrap();
        assert_eq!(c.energy_threshold(4), -1);
        assert!(is_foldable(&hpph, 4, &c));
        let strict = FoldCriteria {
            e_thresh: Some(-2),
            ..c
        };
        assert!(!is_foldable(&hpph, 4, &strict));
        let zero = FoldCriteria {
            e_thresh: Some(0),
            g_max: 0,
        };
        assert!(!is_foldable(&hpph, 4, &zero));
    }

    #[test]
    fn surrogate_examples() {
        assert_eq!(surrogate_score(&hp("HHHH")).e_min, -3);
        assert_eq!(surrogate_score(&hp("HPHP")).e_min, 0);
        assert_eq!(surrogate_score(&hp("HHPHH")).e_min, -2);
    }

    #[test]
    fn cache_is_transparent() {
        let oracle = LatticeOracle::new(DEFAULT_L_MAX);
        let s = hp("HPHPPHHPHPPH");
        let a = oracle.fold(&s).unwrap();
        let b = oracle.fold(&s).unwrap();
        let c = oracle.fold_uncached(&s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn cache_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.csv");
        let oracle = LatticeOracle::new(DEFAULT_L_MAX);
        for s in ["HPPH", "HHPPHH", "PPHHPHPH"] {
            oracle.fold(&hp(s)).unwrap();
        }
        oracle.save_cache(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("HHPPHH,"));
        let fresh = LatticeOracle::new(DEFAULT_L_MAX);
        assert_eq!(fresh.load_cache(&path).unwrap(), 3);
        assert_eq!(
            fresh.fold(&hp("PPHHPHPH")).unwrap(),
            oracle.fold(&hp("PPHHPHPH")).unwrap()
        );
        fs::write(&path, "HPPH,-1,1\n").unwrap();
        assert!(matches!(fresh.load_cache(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn conformation_checks() {
        let u = Conformation {
            coords: vec![(0, 0), (1, 0), (1, 1), (0, 1)],
        };
        assert!(u.is_self_avoiding_walk());
        assert!(u.is_canonical());
        assert_eq!(u.hh_contacts(&[true, false, false, true]), 1);
        let down = Conformation {
            coords: vec![(0, 0), (1, 0), (1, -1)],
        };
        assert!(!down.is_canonical());
        let clash = Conformation {
            coords: vec![(0, 0), (1, 0), (0, 0)],
        };
        assert!(!clash.is_self_avoiding_walk());
    }
}

//! Layer layouts: which positions of the stack keep attention (T) and which
//! are replaced by SSM mixers (M), plus the named replacement strategies.

use crate::{Error, Result};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    T,
    M,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLayout(Vec<LayerKind>);

impl LayerLayout {
    pub fn new(kinds: Vec<LayerKind>) -> Self {
        LayerLayout(kinds)
    }

    pub fn all_t(depth: usize) -> Self {
        LayerLayout(vec![LayerKind::T; depth])
    }

    /// Pure-Mamba control layout.
    pub fn all_m(depth: usize) -> Self {
        LayerLayout(vec![LayerKind::M; depth])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn kinds(&self) -> &[LayerKind] {
        &self.0
    }

    pub fn kind(&self, i: usize) -> LayerKind {
        self.0[i]
    }

    pub fn n_t(&self) -> usize {
        self.0.iter().filter(|k| **k == LayerKind::T).count()
    }

    pub fn n_m(&self) -> usize {
        self.0.iter().filter(|k| **k == LayerKind::M).count()
    }

    pub fn parse(s: &str) -> Result<Self> {
        let mut kinds = Vec::with_capacity(s.len());
        for ch in s.chars() {
            match ch {
                'T' => kinds.push(LayerKind::T),
                'M' => kinds.push(LayerKind::M),
                other => {
                    return Err(Error::Layout(format!(
                        "invalid layout character '{other}' (expected T or M)"
                    )))
                }
            }
        }
        if kinds.is_empty() {
            return Err(Error::Layout("empty layout string".into()));
        }
        Ok(LayerLayout(kinds))
    }
}

impl fmt::Display for LayerLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for k in &self.0 {
            f.write_str(match k {
                LayerKind::T => "T",
                LayerKind::M => "M",
            })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    BlockBeg,
    BlockEnd,
    Front,
    Middle,
    Back,
    Sandwich,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::BlockBeg,
        Strategy::BlockEnd,
        Strategy::Front,
        Strategy::Middle,
        Strategy::Back,
        Strategy::Sandwich,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::BlockBeg => "blockbeg",
            Strategy::BlockEnd => "blockend",
            Strategy::Front => "front",
            Strategy::Middle => "middle",
            Strategy::Back => "back",
            Strategy::Sandwich => "sandwich",
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "blockbeg" | "blockbeginning" => Ok(Strategy::BlockBeg),
            "blockend" => Ok(Strategy::BlockEnd),
            "front" => Ok(Strategy::Front),
            "middle" => Ok(Strategy::Middle),
            "back" => Ok(Strategy::Back),
            "sandwich" => Ok(Strategy::Sandwich),
            other => Err(Error::Layout(format!(
                "unknown strategy '{other}' (expected blockbeg, blockend, front, middle, back, sandwich or importance)"
            ))),
        }
    }
}

/// Parse "a:b" ratio notation, e.g. "1:3".
pub fn parse_ratio(s: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 2 {
        return Err(Error::Layout(format!("ratio '{s}' is not of the form T:M")));
    }
    let t = parts[0]
        .parse::<usize>()
        .map_err(|_| Error::Layout(format!("bad ratio component '{}'", parts[0])))?;
    let m = parts[1]
        .parse::<usize>()
        .map_err(|_| Error::Layout(format!("bad ratio component '{}'", parts[1])))?;
    Ok((t, m))
}

/// Number of M layers implied by depth and a T:M ratio; errors when the
/// ratio does not divide the depth exactly.
pub fn ratio_m_count(depth: usize, ratio_t: usize, ratio_m: usize) -> Result<usize> {
    if ratio_t < 1 {
        return Err(Error::Layout("ratio requires at least one T layer".into()));
    }
    let unit = ratio_t + ratio_m;
    if (depth * ratio_m) % unit != 0 {
        return Err(Error::Layout(format!(
            "ratio {ratio_t}:{ratio_m} does not yield an integral M count at depth {depth}"
        )));
    }
    Ok(depth * ratio_m / unit)
}

/// Generate the layout for one of the named strategies at the given ratio.
pub fn build_layout(
    strategy: Strategy,
    depth: usize,
    ratio_t: usize,
    ratio_m: usize,
) -> Result<LayerLayout> {
    let n_m = ratio_m_count(depth, ratio_t, ratio_m)?;
    if n_m > depth {
        return Err(Error::Layout(format!("{n_m} M layers exceed depth {depth}")));
    }
    let n_t = depth - n_m;
    let kinds = match strategy {
        Strategy::BlockBeg | Strategy::BlockEnd => {
            let unit = ratio_t + ratio_m;
            if depth % unit != 0 {
                return Err(Error::Layout(format!(
                    "depth {depth} not divisible by block size {unit} for {}",
                    strategy.name()
                )));
            }
            let mut kinds = Vec::with_capacity(depth);
            for _ in 0..depth / unit {
                match strategy {
                    Strategy::BlockBeg => {
                        kinds.extend(std::iter::repeat(LayerKind::T).take(ratio_t));
                        kinds.extend(std::iter::repeat(LayerKind::M).take(ratio_m));
                    }
                    _ => {
                        kinds.extend(std::iter::repeat(LayerKind::M).take(ratio_m));
                        kinds.extend(std::iter::repeat(LayerKind::T).take(ratio_t));
                    }
                }
            }
            kinds
        }
        Strategy::Front => {
            let mut kinds = vec![LayerKind::M; n_m];
            kinds.extend(vec![LayerKind::T; n_t]);
            kinds
        }
        Strategy::Back => {
            let mut kinds = vec![LayerKind::T; n_t];
            kinds.extend(vec![LayerKind::M; n_m]);
            kinds
        }
        Strategy::Middle => {
            // centered M block, left-biased on ties
            let start = (depth - n_m) / 2;
            let mut kinds = vec![LayerKind::T; depth];
            for k in kinds.iter_mut().skip(start).take(n_m) {
                *k = LayerKind::M;
            }
            kinds
        }
        Strategy::Sandwich => {
            // M split across both ends, extra M to the front on odd counts
            let front = n_m - n_m / 2;
            let back = n_m - front;
            let mut kinds = vec![LayerKind::T; depth];
            for k in kinds.iter_mut().take(front) {
                *k = LayerKind::M;
            }
            for k in kinds.iter_mut().rev().take(back) {
                *k = LayerKind::M;
            }
            kinds
        }
    };
    Ok(LayerLayout(kinds))
}

/// Turn an importance ranking (most replaceable first) into a layout with
/// the n_m top-ranked layers replaced.
pub fn layout_from_ranking(ranking: &[usize], n_m: usize) -> Result<LayerLayout> {
    let depth = ranking.len();
    if n_m > depth {
        return Err(Error::Layout(format!("n_m {n_m} out of range for depth {depth}")));
    }
    let mut seen = vec![false; depth];
    for &r in ranking {
        if r >= depth || seen[r] {
            return Err(Error::Layout("ranking is not a permutation".into()));
        }
        seen[r] = true;
    }
    let mut kinds = vec![LayerKind::T; depth];
    for &idx in ranking.iter().take(n_m) {
        kinds[idx] = LayerKind::M;
    }
    Ok(LayerLayout(kinds))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(l: &LayerLayout) -> String {
        l.to_string()
    }

    #[test]
    fn table_patterns_at_depth_six() {
        assert_eq!(s(&build_layout(Strategy::BlockBeg, 6, 1, 2).unwrap()), "TMMTMM");
        assert_eq!(s(&build_layout(Strategy::BlockEnd, 6, 1, 2).unwrap()), "MMTMMT");
        assert_eq!(s(&build_layout(Strategy::Front, 6, 1, 1).unwrap()), "MMMTTT");
        assert_eq!(s(&build_layout(Strategy::Middle, 6, 2, 1).unwrap()), "TTMMTT");
        assert_eq!(s(&build_layout(Strategy::Back, 6, 1, 1).unwrap()), "TTTMMM");
        assert_eq!(s(&build_layout(Strategy::Sandwich, 6, 1, 2).unwrap()), "MMTTMM");
    }

    #[test]
    fn ratio_arithmetic_at_depth_24() {
        for (rm, want) in [(1usize, 12usize), (3, 18), (5, 20), (11, 22)] {
            assert_eq!(ratio_m_count(24, 1, rm).unwrap(), want);
        }
        let l = build_layout(Strategy::BlockBeg, 24, 1, 11).unwrap();
        assert_eq!(l.n_t(), 2);
        assert_eq!(l.n_m(), 22);
        assert_eq!(s(&l), format!("T{}T{}", "M".repeat(11), "M".repeat(11)));
    }

    #[test]
    fn block_strategies_reject_indivisible_depth() {
        assert!(build_layout(Strategy::BlockBeg, 7, 1, 2).is_err());
        assert!(build_layout(Strategy::BlockEnd, 10, 1, 3).is_err());
    }

    #[test]
    fn structural_properties_over_strategy_grid() {
        for &depth in &[6usize, 12, 24] {
            for &(rt, rm) in &[(1usize, 1usize), (1, 2), (1, 3), (1, 5), (1, 11), (2, 1)] {
                let Ok(n_m) = ratio_m_count(depth, rt, rm) else {
                    continue;
                };
                for strat in Strategy::ALL {
                    let Ok(l) = build_layout(strat, depth, rt, rm) else {
                        continue;
                    };
                    assert_eq!(l.len(), depth);
                    assert_eq!(l.n_m(), n_m, "{strat:?} {depth} {rt}:{rm}");
                    match strat {
                        Strategy::BlockBeg => assert_eq!(l.kind(0), LayerKind::T),
                        Strategy::BlockEnd => assert_eq!(l.kind(depth - 1), LayerKind::T),
                        Strategy::Front => {
                            assert!(l.kinds()[..n_m].iter().all(|k| *k == LayerKind::M))
                        }
                        Strategy::Back => {
                            assert!(l.kinds()[depth - n_m..].iter().all(|k| *k == LayerKind::M))
                        }
                        _ => {}
                    }
                    // pure function: same arguments, same layout
                    assert_eq!(l, build_layout(strat, depth, rt, rm).unwrap());
                }
            }
        }
    }

    #[test]
    fn sandwich_puts_extra_m_in_front_on_odd_split() {
        let l = build_layout(Strategy::Sandwich, 8, 1, 3).unwrap(); // n_m = 6
        assert_eq!(s(&l), "MMMTTMMM");
        let l = build_layout(Strategy::Sandwich, 4, 1, 3).unwrap(); // n_m = 3
        assert_eq!(s(&l), "MMTM");
    }

    #[test]
    fn ranking_layouts() {
        let ranking = [1usize, 4, 0, 2, 3, 5];
        assert_eq!(s(&layout_from_ranking(&ranking, 0).unwrap()), "TTTTTT");
        assert_eq!(s(&layout_from_ranking(&ranking, 2).unwrap()), "TMTTMT");
        assert_eq!(s(&layout_from_ranking(&ranking, 6).unwrap()), "MMMMMM");
        assert!(layout_from_ranking(&ranking, 7).is_err());
        assert!(layout_from_ranking(&[0, 0, 1], 1).is_err());
    }

    #[test]
    fn layout_string_roundtrip() {
        let l = LayerLayout::parse("TMMTMM").unwrap();
        assert_eq!(l.n_t(), 2);
        assert_eq!(l.to_string(), "TMMTMM");
        assert!(LayerLayout::parse("TMX").is_err());
        assert!(LayerLayout::parse("").is_err());
    }
}

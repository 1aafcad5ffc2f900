//! Exact arithmetic over the ten-marker toy layouts.
//!
//! Markers sit at positions `0, Δ, .., 9Δ` ordered by classifier output. With
//! `δ = 0` every hinge is an integer multiple of `Δ`, so a grouping's cost
//! `μ Σ g² / (2PN) + λ Σ g / (PN)` is `a·μΔ² + b·λΔ` with rational `a, b`.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use super::OracleError;

pub type Rational = Ratio<i64>;

pub const MARKERS: usize = 10;
pub const PER_CLASS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Marker {
    Positive,
    Negative,
}

/// Ten markers, lowest output first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ToyLayout {
    markers: [Marker; MARKERS],
}

impl ToyLayout {
    pub fn new(markers: [Marker; MARKERS]) -> Result<Self, OracleError> {
        let pos = markers.iter().filter(|&&m| m == Marker::Positive).count();
        if pos != PER_CLASS {
            return Err(OracleError::InvalidLayout(format!(
                "need {PER_CLASS} positives and {PER_CLASS} negatives, got {pos} positives"
            )));
        }
        Ok(Self { markers })
    }

    pub fn markers(&self) -> &[Marker; MARKERS] {
        &self.markers
    }

    /// Positions (in units of Δ) of the positives.
    pub fn positives(&self) -> Vec<i64> {
        self.positions(Marker::Positive)
    }

    pub fn negatives(&self) -> Vec<i64> {
        self.positions(Marker::Negative)
    }

    fn positions(&self, kind: Marker) -> Vec<i64> {
        (0..MARKERS).filter(|&i| self.markers[i] == kind).map(|i| i as i64).collect()
    }

    fn swapped(&self, i: usize, j: usize) -> Self {
        let mut markers = self.markers;
        markers.swap(i, j);
        Self { markers }
    }

    /// Every arrangement of five positives and five negatives, in
    /// lexicographic order of positive positions.
    pub fn all() -> Vec<ToyLayout> {
        let mut out = Vec::with_capacity(252);
        for mask in 0u32..(1 << MARKERS) {
            if mask.count_ones() as usize != PER_CLASS {
                continue;
            }
            let mut markers = [Marker::Negative; MARKERS];
            for (i, m) in markers.iter_mut().enumerate() {
                if mask & (1 << i) != 0 {
                    *m = Marker::Positive;
                }
            }
            out.push(Self { markers });
        }
        out.sort_by_key(|l| l.positives());
        out
    }
}

impl fmt::Display for ToyLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for m in &self.markers {
            f.write_str(match m {
                Marker::Positive => "P",
                Marker::Negative => "N",
            })?;
        }
        Ok(())
    }
}

impl FromStr for ToyLayout {
    type Err = OracleError;

    /// Parses a string such as `NNPNNPPNPP`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let chars: Vec<char> = s.trim().chars().collect();
        if chars.len() != MARKERS {
            return Err(OracleError::InvalidLayout(format!("expected {MARKERS} markers, got `{s}`")));
        }
        let mut markers = [Marker::Negative; MARKERS];
        for (m, c) in markers.iter_mut().zip(chars) {
            *m = match c {
                'P' | 'p' => Marker::Positive,
                'N' | 'n' => Marker::Negative,
                other => return Err(OracleError::InvalidLayout(format!("unknown marker `{other}`"))),
            };
        }
        Self::new(markers)
    }
}

impl Serialize for ToyLayout {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Swap {
    /// Leftmost positive with its immediate right neighbour.
    Left,
    /// Rightmost negative with the nearest positive to its left.
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    PerPositive,
    PerNegative,
    PerPair,
}

/// `quadratic·μΔ² + linear·λΔ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Coefficients {
    pub quadratic: Rational,
    pub linear: Rational,
}

impl Coefficients {
    pub fn new(quadratic: (i64, i64), linear: (i64, i64)) -> Self {
        Self {
            quadratic: Rational::new(quadratic.0, quadratic.1),
            linear: Rational::new(linear.0, linear.1),
        }
    }

    /// True when `self` is at least `other` in both coefficients and larger in
    /// one, i.e. larger for every positive `μ, λ, Δ`.
    pub fn dominates(&self, other: &Coefficients) -> bool {
        self.quadratic >= other.quadratic && self.linear >= other.linear && self != other
    }
}

impl std::ops::Sub for Coefficients {
    type Output = Coefficients;

    fn sub(self, rhs: Self) -> Self {
        Self {
            quadratic: self.quadratic - rhs.quadratic,
            linear: self.linear - rhs.linear,
        }
    }
}

impl fmt::Display for Coefficients {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}·μΔ² + {}·λΔ", self.quadratic, self.linear)
    }
}

impl Serialize for Coefficients {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("Coefficients", 2)?;
        st.serialize_field("quadratic", &self.quadratic.to_string())?;
        st.serialize_field("linear", &self.linear.to_string())?;
        st.end()
    }
}

/// Left swap decrement stated for the toy figure.
pub fn paper_left() -> Coefficients {
    Coefficients::new((39, 50), (3, 25))
}

/// Right swap decrement stated for the toy figure.
pub fn paper_right() -> Coefficients {
    Coefficients::new((19, 50), (11, 25))
}

/// Hinge values (units of Δ) under a grouping.
pub fn grouped_hinges(layout: &ToyLayout, grouping: Grouping) -> Vec<i64> {
    let pos = layout.positives();
    let neg = layout.negatives();
    let h = |p: i64, n: i64| (n - p).max(0);
    match grouping {
        Grouping::PerPositive => pos.iter().map(|&p| neg.iter().map(|&n| h(p, n)).sum()).collect(),
        Grouping::PerNegative => neg.iter().map(|&n| pos.iter().map(|&p| h(p, n)).sum()).collect(),
        Grouping::PerPair => pos.iter().flat_map(|&p| neg.iter().map(move |&n| h(p, n))).collect(),
    }
}

/// Cost coefficients of a layout under a grouping, with equal multipliers.
pub fn grouped_cost(layout: &ToyLayout, grouping: Grouping) -> Coefficients {
    let g = grouped_hinges(layout, grouping);
    let pn = (PER_CLASS * PER_CLASS) as i64;
    Coefficients {
        quadratic: Rational::new(g.iter().map(|v| v * v).sum(), 2 * pn),
        linear: Rational::new(g.iter().sum(), pn),
    }
}

/// Total hinge mass `Σ_j Σ_k max(0, n_k - p_j)` in units of Δ.
pub fn hinge_mass(layout: &ToyLayout) -> i64 {
    grouped_hinges(layout, Grouping::PerPair).iter().sum()
}

pub fn apply_swap(layout: &ToyLayout, swap: Swap) -> Result<ToyLayout, OracleError> {
    let m = layout.markers();
    match swap {
        Swap::Left => {
            let i = m.iter().position(|&x| x == Marker::Positive).expect("five positives");
            if i + 1 >= MARKERS {
                return Err(OracleError::InapplicableSwap(format!("{layout}: leftmost positive has no right neighbour")));
            }
            Ok(layout.swapped(i, i + 1))
        }
        Swap::Right => {
            let k = m.iter().rposition(|&x| x == Marker::Negative).expect("five negatives");
            let j = m[..k]
                .iter()
                .rposition(|&x| x == Marker::Positive)
                .ok_or_else(|| OracleError::InapplicableSwap(format!("{layout}: no positive left of the rightmost negative")))?;
            Ok(layout.swapped(j, k))
        }
    }
}

/// Cost decrease caused by a swap under a grouping.
pub fn swap_decrement_grouped(layout: &ToyLayout, swap: Swap, grouping: Grouping) -> Result<Coefficients, OracleError> {
    let after = apply_swap(layout, swap)?;
    Ok(grouped_cost(layout, grouping) - grouped_cost(&after, grouping))
}

/// Decrease of the per-positive constraint cost caused by a swap.
pub fn swap_decrement(layout: &ToyLayout, swap: Swap) -> Result<Coefficients, OracleError> {
    swap_decrement_grouped(layout, swap, Grouping::PerPositive)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayoutMatch {
    pub layout: ToyLayout,
    pub left: Coefficients,
    pub right: Option<Coefficients>,
}

impl LayoutMatch {
    /// The right swap's quadratic coefficient also matches the stated one.
    pub fn matches_right_quadratic(&self) -> bool {
        self.right.is_some_and(|r| r.quadratic == paper_right().quadratic)
    }
}

/// All layouts whose left-swap decrement equals the stated one, with their
/// right-swap decrements.
pub fn enumerate_layouts() -> Vec<LayoutMatch> {
    let target = paper_left();
    ToyLayout::all()
        .into_iter()
        .filter_map(|layout| {
            let left = swap_decrement(&layout, Swap::Left).ok()?;
            (left == target).then(|| LayoutMatch {
                layout,
                left,
                right: swap_decrement(&layout, Swap::Right).ok(),
            })
        })
        .collect()
}

/// Layouts that reproduce the left decrement and the right quadratic
/// coefficient.
pub fn consistent_layouts() -> Vec<LayoutMatch> {
    enumerate_layouts()
        .into_iter()
        .filter(LayoutMatch::matches_right_quadratic)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupingDecrements {
    pub grouping: Grouping,
    pub left: Coefficients,
    pub right: Coefficients,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AsymmetryReport {
    pub layout: ToyLayout,
    pub groupings: Vec<GroupingDecrements>,
    pub per_positive_prefers_left: bool,
    pub per_negative_prefers_right: bool,
    /// Hinge mass removed by each swap, units of Δ.
    pub pair_mass_change: (i64, i64),
    pub pair_mass_identical: bool,
}

pub fn asymmetry_demo(layout: &ToyLayout) -> Result<AsymmetryReport, OracleError> {
    let mut groupings = Vec::with_capacity(3);
    for grouping in [Grouping::PerPositive, Grouping::PerNegative, Grouping::PerPair] {
        groupings.push(GroupingDecrements {
            grouping,
            left: swap_decrement_grouped(layout, Swap::Left, grouping)?,
            right: swap_decrement_grouped(layout, Swap::Right, grouping)?,
        });
    }
    let mass = hinge_mass(layout);
    let left_mass = mass - hinge_mass(&apply_swap(layout, Swap::Left)?);
    let right_mass = mass - hinge_mass(&apply_swap(layout, Swap::Right)?);
    Ok(AsymmetryReport {
        layout: *layout,
        per_positive_prefers_left: groupings[0].left.dominates(&groupings[0].right),
        per_negative_prefers_right: groupings[1].right.dominates(&groupings[1].left),
        pair_mass_change: (left_mass, right_mass),
        pair_mass_identical: left_mass == right_mass && groupings[2].left == groupings[2].right,
        groupings,
    })
}

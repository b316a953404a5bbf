//! Feature maps over covariates `x` or covariate-treatment pairs `(x, a)`.
//!
//! A map is written as a comma-separated list of terms. Individual terms are
//! `1` (intercept), `xj`, `xj^2`, `xi*xj`, and `a` or `a*<term>` for
//! treatment-crossed terms. Named bases expand to several terms:
//!
//! | name | terms |
//! |------|-------|
//! | `intercept` | `1` |
//! | `linear` | `1, x1..xp` |
//! | `quadratic` | `linear` plus `xj^2` |
//! | `linear+interactions` | `linear` plus `xi*xj`, i < j |
//! | `quadratic+interactions` | `quadratic` plus `xi*xj`, i < j |
//!
//! Appending `*a` to a named base crosses it with treatment: the base terms,
//! then `a`, then `a` times every non-intercept base term. Named bases
//! depend on `p`, so configs carry an unresolved [`FeatureSpec`] which is
//! bound to a dimension with [`FeatureSpec::resolve`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Treatment};
use crate::error::{EarlError, Result};

/// A function of `x` alone. Indices are zero-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Basis {
    Intercept,
    Coord(usize),
    Square(usize),
    Product(usize, usize),
}

impl Basis {
    #[inline]
    pub fn eval(self, x: &[f64]) -> f64 {
        match self {
            Basis::Intercept => 1.0,
            Basis::Coord(j) => x[j],
            Basis::Square(j) => x[j] * x[j],
            Basis::Product(i, j) => x[i] * x[j],
        }
    }

    fn max_index(self) -> Option<usize> {
        match self {
            Basis::Intercept => None,
            Basis::Coord(j) | Basis::Square(j) => Some(j),
            Basis::Product(i, j) => Some(i.max(j)),
        }
    }
}

impl fmt::Display for Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Basis::Intercept => write!(f, "1"),
            Basis::Coord(j) => write!(f, "x{}", j + 1),
            Basis::Square(j) => write!(f, "x{}^2", j + 1),
            Basis::Product(i, j) => write!(f, "x{}*x{}", i + 1, j + 1),
        }
    }
}

/// A basis function, optionally multiplied by the treatment code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Term {
    pub basis: Basis,
    pub crossed: bool,
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.crossed, self.basis) {
            (false, b) => write!(f, "{b}"),
            (true, Basis::Intercept) => write!(f, "a"),
            (true, b) => write!(f, "a*{b}"),
        }
    }
}

/// Unresolved feature-map description as it appears in configs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureSpec(pub String);

impl FeatureSpec {
    pub fn new(s: impl Into<String>) -> Self {
        FeatureSpec(s.into())
    }

    pub fn resolve(&self, p: usize) -> Result<FeatureMap> {
        FeatureMap::parse(&self.0, p)
    }
}

impl fmt::Display for FeatureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for FeatureSpec {
    type Err = EarlError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(FeatureSpec(s.to_string()))
    }
}

/// An ordered list of terms bound to covariate dimension `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureMap {
    p: usize,
    terms: Vec<Term>,
}

impl FeatureMap {
    pub fn new(p: usize, terms: Vec<Term>) -> Result<Self> {
        for (k, t) in terms.iter().enumerate() {
            if let Some(j) = t.basis.max_index() {
                if j >= p {
                    return Err(EarlError::config(format!(
                        "term {t} refers to a covariate beyond p = {p}"
                    )));
                }
            }
            if terms[..k].contains(t) {
                return Err(EarlError::config(format!("duplicate term {t}")));
            }
            if k > 0 && *t == INTERCEPT {
                return Err(EarlError::config("the intercept must be the first term"));
            }
        }
        Ok(FeatureMap { p, terms })
    }

    pub fn parse(spec: &str, p: usize) -> Result<Self> {
        let mut terms = Vec::new();
        for token in spec.split(',').map(str::trim) {
            if token.is_empty() {
                return Err(EarlError::config(format!("empty term in feature map `{spec}`")));
            }
            if let Some(expanded) = named_base(token, p) {
                terms.extend(expanded);
                continue;
            }
            if let Some(base) = token
                .strip_suffix("*a")
                .or_else(|| token.strip_prefix("a*"))
                .and_then(|b| named_base(b, p))
            {
                terms.extend(base.iter().copied());
                terms.push(Term { basis: Basis::Intercept, crossed: true });
                terms.extend(
                    base.iter()
                        .filter(|t| t.basis != Basis::Intercept)
                        .map(|t| Term { basis: t.basis, crossed: true }),
                );
                continue;
            }
            terms.push(parse_term(token)?);
        }
        // Named bases may overlap (e.g. "linear,quadratic"); keep first occurrences.
        let mut dedup: Vec<Term> = Vec::with_capacity(terms.len());
        for t in terms {
            if !dedup.contains(&t) {
                dedup.push(t);
            }
        }
        if let Some(pos) = dedup.iter().position(|t| *t == INTERCEPT) {
            let t = dedup.remove(pos);
            dedup.insert(0, t);
        }
        FeatureMap::new(p, dedup)
    }

    #[inline]
    pub fn p(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn has_intercept(&self) -> bool {
        self.terms.first() == Some(&INTERCEPT)
    }

    pub fn has_treatment_terms(&self) -> bool {
        self.terms.iter().any(|t| t.crossed)
    }

    pub fn position(&self, term: Term) -> Option<usize> {
        self.terms.iter().position(|t| *t == term)
    }

    /// The same map with the intercept removed, for use as a rule basis.
    pub fn without_intercept(&self) -> FeatureMap {
        FeatureMap {
            p: self.p,
            terms: self.terms.iter().copied().filter(|t| *t != INTERCEPT).collect(),
        }
    }

    pub fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.p {
            return Err(EarlError::shape(format!(
                "covariate vector has length {}, feature map expects {}",
                x.len(),
                self.p
            )));
        }
        Ok(())
    }

    /// Writes the features of `(x, a)` into `out`. `a` is ignored when the map
    /// has no treatment terms.
    #[inline]
    pub fn fill(&self, x: &[f64], a: Treatment, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.terms.len());
        let av = a.value();
        for (o, t) in out.iter_mut().zip(&self.terms) {
            let v = t.basis.eval(x);
            *o = if t.crossed { av * v } else { v };
        }
    }

    pub fn features(&self, x: &[f64], a: Treatment) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut out = vec![0.0; self.len()];
        self.fill(x, a, &mut out);
        Ok(out)
    }

    /// Row-major `n x len` design. Treatment terms use `arm` when given,
    /// otherwise each subject's observed treatment.
    pub fn design(&self, data: &Dataset, arm: Option<Treatment>) -> Result<Vec<f64>> {
        if data.p() != self.p {
            return Err(EarlError::shape(format!(
                "dataset has p = {}, feature map expects {}",
                data.p(),
                self.p
            )));
        }
        let q = self.len();
        let mut z = vec![0.0; data.n() * q];
        for (i, row) in z.chunks_exact_mut(q.max(1)).enumerate().take(data.n()) {
            let a = arm.unwrap_or_else(|| data.treatment(i));
            self.fill(data.row(i), a, &mut row[..q]);
        }
        Ok(z)
    }
}

impl fmt::Display for FeatureMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, t) in self.terms.iter().enumerate() {
            if k > 0 {
                f.write_str(",")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

const INTERCEPT: Term = Term { basis: Basis::Intercept, crossed: false };

fn named_base(name: &str, p: usize) -> Option<Vec<Term>> {
    let plain = |basis| Term { basis, crossed: false };
    let linear = || (0..p).map(|j| plain(Basis::Coord(j)));
    let squares = || (0..p).map(|j| plain(Basis::Square(j)));
    let products = || {
        (0..p).flat_map(move |i| (i + 1..p).map(move |j| plain(Basis::Product(i, j))))
    };
    let mut terms = vec![INTERCEPT];
    match name {
        "intercept" => {}
        "linear" => terms.extend(linear()),
        "quadratic" => terms.extend(linear().chain(squares())),
        "linear+interactions" => terms.extend(linear().chain(products())),
        "quadratic+interactions" => terms.extend(linear().chain(squares()).chain(products())),
        _ => return None,
    }
    Some(terms)
}

fn parse_term(token: &str) -> Result<Term> {
    let bad = || EarlError::config(format!("unrecognized feature term `{token}`"));
    let (crossed, body) = match token {
        "a" => return Ok(Term { basis: Basis::Intercept, crossed: true }),
        t => match t.strip_prefix("a*").or_else(|| t.strip_suffix("*a")) {
            Some(rest) => (true, rest),
            None => (false, t),
        },
    };
    let coord = |s: &str| -> Result<usize> {
        s.strip_prefix('x')
            .and_then(|d| d.parse::<usize>().ok())
            .filter(|&j| j >= 1)
            .map(|j| j - 1)
            .ok_or_else(bad)
    };
    let basis = if body == "1" {
        Basis::Intercept
    } else if let Some(v) = body.strip_suffix("^2") {
        Basis::Square(coord(v)?)
    } else if let Some((l, r)) = body.split_once('*') {
        let (i, j) = (coord(l)?, coord(r)?);
        match i.cmp(&j) {
            std::cmp::Ordering::Equal => Basis::Square(i),
            std::cmp::Ordering::Less => Basis::Product(i, j),
            std::cmp::Ordering::Greater => Basis::Product(j, i),
        }
    } else {
        Basis::Coord(coord(body)?)
    };
    Ok(Term { basis, crossed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn named_maps_have_expected_sizes() {
        let p = 4;
        let n = |s: &str| FeatureMap::parse(s, p).unwrap().len();
        assert_eq!(n("intercept"), 1);
        assert_eq!(n("linear"), 1 + p);
        assert_eq!(n("quadratic"), 1 + 2 * p);
        assert_eq!(n("linear+interactions"), 1 + p + p * (p - 1) / 2);
        assert_eq!(n("quadratic+interactions"), 1 + 2 * p + p * (p - 1) / 2);
        assert_eq!(n("linear*a"), 2 * (1 + p));
        assert_eq!(n("quadratic*a"), 2 * (1 + 2 * p));
    }

    #[test]
    fn explicit_lists_and_display_round_trip() {
        let m = FeatureMap::parse("1, x1, x2, x2*x1, a, a*x1, x3^2", 3).unwrap();
        assert_eq!(m.to_string(), "1,x1,x2,x1*x2,a,a*x1,x3^2");
        let back = FeatureMap::parse(&m.to_string(), 3).unwrap();
        assert_eq!(back, m);
        let v = m.features(&[2.0, 3.0, 5.0], Treatment::Neg).unwrap();
        assert_eq!(v, vec![1.0, 2.0, 3.0, 6.0, -1.0, -2.0, 25.0]);
    }

    #[test]
    fn intercept_goes_first() {
        let m = FeatureMap::parse("x1,1", 1).unwrap();
        assert!(m.has_intercept());
        assert_eq!(m.to_string(), "1,x1");
        assert!(FeatureMap::new(1, vec![Term { basis: Basis::Coord(0), crossed: false }, INTERCEPT]).is_err());
    }

    #[test]
    fn rejects_bad_terms() {
        assert!(FeatureMap::parse("x0", 2).is_err());
        assert!(FeatureMap::parse("x3", 2).is_err());
        assert!(FeatureMap::parse("z1", 2).is_err());
        assert!(FeatureMap::parse("linear,,x1", 2).is_err());
        assert!(FeatureMap::parse("cubic", 2).is_err());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let m = FeatureMap::parse("linear", 3).unwrap();
        assert!(m.features(&[1.0, 2.0], Treatment::Pos).is_err());
    }

    proptest! {
        #[test]
        fn feature_length_is_fixed(x in proptest::collection::vec(-10f64..10.0, 5), pos in any::<bool>()) {
            let a = if pos { Treatment::Pos } else { Treatment::Neg };
            for name in ["linear", "quadratic+interactions*a", "1,x2,a*x5"] {
                let m = FeatureMap::parse(name, 5).unwrap();
                let f = m.features(&x, a).unwrap();
                prop_assert_eq!(f.len(), m.len());
                if m.has_intercept() {
                    prop_assert_eq!(f[0], 1.0);
                }
            }
        }
    }
}

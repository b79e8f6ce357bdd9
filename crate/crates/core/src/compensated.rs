//! Scalars carried as an unevaluated sum `hi + lo` of two doubles.
//!
//! Reductions to a scalar (loss means, weighted sums) keep the rounding
//! error of every addition in `lo`. Two such values that differ by far less
//! than one ulp of `hi` can then still be subtracted accurately, which is
//! what central differences of a large loss need.

/// `(s, e)` with `s = fl(a + b)` and `a + b = s + e` exactly.
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub(crate) struct Dd {
    pub hi: f64,
    pub lo: f64,
}

impl Dd {
    pub fn new(hi: f64, lo: f64) -> Self {
        let (hi, lo) = two_sum(hi, lo);
        Self { hi, lo }
    }

    pub fn add(self, other: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, other.hi);
        Dd::new(s, e + self.lo + other.lo)
    }

    pub fn mul_f64(self, k: f64) -> Dd {
        let p = self.hi * k;
        let e = self.hi.mul_add(k, -p);
        Dd::new(p, e + self.lo * k)
    }

    pub fn div_f64(self, k: f64) -> Dd {
        let q = self.hi / k;
        let r = (-q).mul_add(k, self.hi) + self.lo;
        Dd::new(q, r / k)
    }
}

/// Running sum that accumulates the exact rounding error of each addition.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct Acc {
    s: f64,
    c: f64,
}

impl Acc {
    pub fn add(&mut self, x: f64) {
        let (s, e) = two_sum(self.s, x);
        self.s = s;
        self.c += e;
    }

    pub fn total(self) -> Dd {
        Dd::new(self.s, self.c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_lost_low_bits() {
        let mut a = Acc::default();
        a.add(1e16);
        a.add(1.0);
        a.add(-1e16);
        assert_eq!(a.total().hi, 1.0);

        let third = Dd::new(1.0, 0.0).div_f64(3.0);
        let back = third.mul_f64(3.0);
        assert!((back.hi - 1.0).abs() + back.lo.abs() < 1e-30 || back.hi == 1.0);
        let x = Dd::new(1.0, 1e-20).add(Dd::new(-1.0, 0.0));
        assert_eq!(x.hi, 1e-20);
    }
}

//! Scalar abstractions.
//!
//! [`Scalar`] is a plain floating point type (`f32` or `f64`) used to store
//! data. [`Real`] is anything the quasi-likelihood can be evaluated in: a
//! `Scalar` itself, or a [`Taylor3`] jet that carries directional
//! derivatives up to third order through the same code path.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, RemAssign, Sub, SubAssign};

use num_traits::{Float, FromPrimitive, Num, NumAssign, One, ToPrimitive, Zero};

/// floating point storage type: f32 or f64
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Default + Debug + Display + Sum + Send + Sync + 'static + Real<Base = Self>
{
    /// Lossy conversion from `f64`. Panics only for types that cannot hold finite f64 values.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant must be representable")
    }

    fn of_usize(v: usize) -> Self {
        Self::from_usize(v).expect("usize must be representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Number system the likelihood is evaluated in.
pub trait Real:
    Copy + Debug + Send + Sync + Num + NumAssign + Neg<Output = Self> + 'static
{
    type Base: Scalar;

    fn lift(v: Self::Base) -> Self;

    /// Value part (the jet's constant coefficient).
    fn base(self) -> Self::Base;

    fn square_root(self) -> Self;
    fn natural_log(self) -> Self;
    fn exponential(self) -> Self;

    fn scale(self, c: Self::Base) -> Self {
        self * Self::lift(c)
    }
}

macro_rules! real_for_float {
    ($($t:ty)*) => ($(
        impl Real for $t {
            type Base = $t;
            #[inline]
            fn lift(v: $t) -> $t { v }
            #[inline]
            fn base(self) -> $t { self }
            #[inline]
            fn square_root(self) -> $t { Float::sqrt(self) }
            #[inline]
            fn natural_log(self) -> $t { Float::ln(self) }
            #[inline]
            fn exponential(self) -> $t { Float::exp(self) }
        }
    )*)
}

real_for_float!(f32 f64);

/// Truncated Taylor polynomial `c0 + c1 t + c2 t² + c3 t³`.
///
/// Evaluating `f(θ + t u)` with jets gives `c_k = D^k f(θ)[u^k] / k!`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Taylor3<F> {
    pub c: [F; 4],
}

impl<F: Scalar> Taylor3<F> {
    pub fn constant(v: F) -> Self {
        Self { c: [v, F::zero(), F::zero(), F::zero()] }
    }

    /// The line `v + d t`.
    pub fn variable(v: F, d: F) -> Self {
        Self { c: [v, d, F::zero(), F::zero()] }
    }

    /// k-th directional derivative, `k! c_k`.
    pub fn derivative(&self, k: usize) -> F {
        let fact = [1.0, 1.0, 2.0, 6.0][k];
        self.c[k] * F::of(fact)
    }

    /// Compose with a scalar function given `f(c0), f'(c0), f''(c0), f'''(c0)`.
    fn compose(self, f0: F, f1: F, f2: F, f3: F) -> Self {
        let [_, g1, g2, g3] = self.c;
        let half = F::of(0.5);
        let sixth = F::of(1.0 / 6.0);
        Self {
            c: [
                f0,
                f1 * g1,
                f1 * g2 + half * f2 * g1 * g1,
                f1 * g3 + f2 * g1 * g2 + sixth * f3 * g1 * g1 * g1,
            ],
        }
    }

    fn recip(self) -> Self {
        let x = self.c[0];
        let r = F::one() / x;
        let r2 = r * r;
        self.compose(r, -r2, F::of(2.0) * r2 * r, F::of(-6.0) * r2 * r2)
    }
}

impl<F: Scalar> Add for Taylor3<F> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let mut c = self.c;
        for (a, b) in c.iter_mut().zip(o.c) {
            *a += b;
        }
        Self { c }
    }
}

impl<F: Scalar> Sub for Taylor3<F> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        let mut c = self.c;
        for (a, b) in c.iter_mut().zip(o.c) {
            *a -= b;
        }
        Self { c }
    }
}

impl<F: Scalar> Mul for Taylor3<F> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let a = self.c;
        let b = o.c;
        Self {
            c: [
                a[0] * b[0],
                a[0] * b[1] + a[1] * b[0],
                a[0] * b[2] + a[1] * b[1] + a[2] * b[0],
                a[0] * b[3] + a[1] * b[2] + a[2] * b[1] + a[3] * b[0],
            ],
        }
    }
}

impl<F: Scalar> Div for Taylor3<F> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        self * o.recip()
    }
}

// Only needed to satisfy `Num`; never used by the likelihood code.
impl<F: Scalar> Rem for Taylor3<F> {
    type Output = Self;
    fn rem(self, o: Self) -> Self {
        let q = (self.c[0] / o.c[0]).trunc();
        self - o * Self::constant(q)
    }
}

impl<F: Scalar> Neg for Taylor3<F> {
    type Output = Self;
    fn neg(self) -> Self {
        Self { c: self.c.map(|v| -v) }
    }
}

macro_rules! assign_ops {
    ($($tr:ident $m:ident $op:tt),*) => ($(
        impl<F: Scalar> $tr for Taylor3<F> {
            fn $m(&mut self, o: Self) { *self = *self $op o; }
        }
    )*)
}

assign_ops!(AddAssign add_assign +, SubAssign sub_assign -, MulAssign mul_assign *, DivAssign div_assign /, RemAssign rem_assign %);

impl<F: Scalar> Zero for Taylor3<F> {
    fn zero() -> Self {
        Self::constant(F::zero())
    }
    fn is_zero(&self) -> bool {
        self.c.iter().all(|v| v.is_zero())
    }
}

impl<F: Scalar> One for Taylor3<F> {
    fn one() -> Self {
        Self::constant(F::one())
    }
}

impl<F: Scalar> Num for Taylor3<F> {
    type FromStrRadixErr = F::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        F::from_str_radix(s, radix).map(Self::constant)
    }
}

impl<F: Scalar> Real for Taylor3<F> {
    type Base = F;

    fn lift(v: F) -> Self {
        Self::constant(v)
    }

    fn base(self) -> F {
        self.c[0]
    }

    fn square_root(self) -> Self {
        let x = self.c[0];
        let s = x.sqrt();
        let half = F::of(0.5);
        let d1 = half / s;
        let d2 = -half * d1 / x;
        let d3 = F::of(-1.5) * d2 / x;
        self.compose(s, d1, d2, d3)
    }

    fn natural_log(self) -> Self {
        let x = self.c[0];
        let r = F::one() / x;
        self.compose(x.ln(), r, -r * r, F::of(2.0) * r * r * r)
    }

    fn exponential(self) -> Self {
        let e = self.c[0].exp();
        self.compose(e, e, e, e)
    }

    fn scale(self, k: F) -> Self {
        Self { c: self.c.map(|v| v * k) }
    }
}

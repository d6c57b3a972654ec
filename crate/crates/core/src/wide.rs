//! Double-double scalar used as a high-precision reference.
//!
//! A value is an unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`, giving
//! about 32 significant digits. Arithmetic, `sqrt`, `exp`, `ln` and `erf` are
//! accurate to that level. Other transcendental functions round through
//! `f64`; the model never calls them.

use std::fmt;
use std::iter::Sum;
use std::num::FpCategory;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, RemAssign, Sub, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, Num, NumCast, One, ToPrimitive, Zero};

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, PartialOrd)]
pub struct Wide {
    hi: f64,
    lo: f64,
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Wide {
    pub const fn new(x: f64) -> Self {
        Wide { hi: x, lo: 0.0 }
    }

    /// Normalizes an arbitrary pair.
    pub fn from_parts(hi: f64, lo: f64) -> Self {
        let (hi, lo) = two_sum(hi, lo);
        Wide { hi, lo }
    }

    pub fn hi(self) -> f64 {
        self.hi
    }

    pub fn lo(self) -> f64 {
        self.lo
    }

    fn renorm(hi: f64, lo: f64) -> Self {
        let (hi, lo) = quick_two_sum(hi, lo);
        Wide { hi, lo }
    }

    fn scale2(self, k: i32) -> Self {
        let f = 2f64.powi(k);
        Wide {
            hi: self.hi * f,
            lo: self.lo * f,
        }
    }
}

impl fmt::Display for Wide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&(self.hi + self.lo), f)
    }
}

impl Add for Wide {
    type Output = Wide;
    #[inline]
    fn add(self, b: Wide) -> Wide {
        let (s1, s2) = two_sum(self.hi, b.hi);
        let (t1, t2) = two_sum(self.lo, b.lo);
        let (s1, s2) = quick_two_sum(s1, s2 + t1);
        Wide::renorm(s1, s2 + t2)
    }
}

impl Neg for Wide {
    type Output = Wide;
    #[inline]
    fn neg(self) -> Wide {
        Wide {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for Wide {
    type Output = Wide;
    #[inline]
    fn sub(self, b: Wide) -> Wide {
        self + (-b)
    }
}

impl Mul for Wide {
    type Output = Wide;
    #[inline]
    fn mul(self, b: Wide) -> Wide {
        let (p1, p2) = two_prod(self.hi, b.hi);
        Wide::renorm(p1, p2 + (self.hi * b.lo + self.lo * b.hi))
    }
}

impl Div for Wide {
    type Output = Wide;
    fn div(self, b: Wide) -> Wide {
        // Three rounds of long division.
        let q1 = self.hi / b.hi;
        let r = self - b * Wide::new(q1);
        let q2 = r.hi / b.hi;
        let r = r - b * Wide::new(q2);
        let q3 = r.hi / b.hi;
        Wide::renorm(q1, q2) + Wide::new(q3)
    }
}

impl Rem for Wide {
    type Output = Wide;
    fn rem(self, b: Wide) -> Wide {
        self - (self / b).trunc() * b
    }
}

macro_rules! assign {
    ($($tr:ident $f:ident $op:tt),*) => {
        $(impl $tr for Wide {
            #[inline]
            fn $f(&mut self, rhs: Wide) {
                *self = *self $op rhs;
            }
        })*
    };
}

assign!(AddAssign add_assign +, SubAssign sub_assign -, MulAssign mul_assign *, DivAssign div_assign /, RemAssign rem_assign %);

impl Sum for Wide {
    fn sum<I: Iterator<Item = Wide>>(iter: I) -> Wide {
        iter.fold(Wide::zero(), |a, b| a + b)
    }
}

impl Zero for Wide {
    fn zero() -> Self {
        Wide::new(0.0)
    }
    fn is_zero(&self) -> bool {
        self.hi == 0.0
    }
}

impl One for Wide {
    fn one() -> Self {
        Wide::new(1.0)
    }
}

impl Num for Wide {
    type FromStrRadixErr = num_traits::ParseFloatError;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        <f64 as Num>::from_str_radix(s, radix).map(Wide::new)
    }
}

impl ToPrimitive for Wide {
    fn to_i64(&self) -> Option<i64> {
        let t = self.trunc();
        (t.hi as i128 + t.lo as i128).try_into().ok()
    }
    fn to_u64(&self) -> Option<u64> {
        let t = self.trunc();
        (t.hi as i128 + t.lo as i128).try_into().ok()
    }
    fn to_f64(&self) -> Option<f64> {
        Some(self.hi + self.lo)
    }
}

impl FromPrimitive for Wide {
    fn from_i64(n: i64) -> Option<Self> {
        let hi = n as f64;
        Some(Wide::renorm(hi, (n as i128 - hi as i128) as f64))
    }
    fn from_u64(n: u64) -> Option<Self> {
        let hi = n as f64;
        Some(Wide::renorm(hi, (n as i128 - hi as i128) as f64))
    }
    fn from_f64(n: f64) -> Option<Self> {
        Some(Wide::new(n))
    }
}

impl NumCast for Wide {
    fn from<T: ToPrimitive>(n: T) -> Option<Self> {
        n.to_f64().map(Wide::new)
    }
}

macro_rules! consts {
    ($(($name:ident, $lo:expr)),* $(,)?) => {
        impl FloatConst for Wide {
            $(fn $name() -> Self { Wide { hi: std::f64::consts::$name, lo: $lo } })*
        }
    };
}

consts!(
    (E, 1.4456468917292502e-16),
    (FRAC_1_PI, -1.9678676675182486e-17),
    (FRAC_1_SQRT_2, -4.833646656726457e-17),
    (FRAC_2_PI, -3.935735335036497e-17),
    (FRAC_2_SQRT_PI, 1.533545961316588e-17),
    (FRAC_PI_2, 6.123233995736766e-17),
    (FRAC_PI_3, -1.072081766451091e-16),
    (FRAC_PI_4, 3.061616997868383e-17),
    (FRAC_PI_6, -5.360408832255455e-17),
    (FRAC_PI_8, 1.5308084989341915e-17),
    (LN_10, -2.1707562233822494e-16),
    (LN_2, 2.3190468138462996e-17),
    (LOG10_E, 1.098319650216765e-17),
    (LOG2_E, 2.0355273740931033e-17),
    (PI, 1.2246467991473532e-16),
    (SQRT_2, -9.667293313452913e-17),
);

macro_rules! through_f64 {
    (unary $($name:ident),*) => {
        $(fn $name(self) -> Self { Wide::new((self.hi + self.lo).$name()) })*
    };
    (binary $($name:ident),*) => {
        $(fn $name(self, other: Self) -> Self { Wide::new((self.hi + self.lo).$name(other.hi + other.lo)) })*
    };
}

impl Float for Wide {
    through_f64!(unary cbrt, sin, cos, tan, asin, acos, atan, sinh, cosh, tanh, asinh, acosh, atanh);
    through_f64!(binary hypot, atan2);

    fn nan() -> Self {
        Wide::new(f64::NAN)
    }
    fn infinity() -> Self {
        Wide::new(f64::INFINITY)
    }
    fn neg_infinity() -> Self {
        Wide::new(f64::NEG_INFINITY)
    }
    fn neg_zero() -> Self {
        Wide::new(-0.0)
    }
    fn min_value() -> Self {
        Wide::new(f64::MIN)
    }
    fn min_positive_value() -> Self {
        Wide::new(f64::MIN_POSITIVE)
    }
    fn max_value() -> Self {
        Wide::new(f64::MAX)
    }
    fn epsilon() -> Self {
        Wide::new(2f64.powi(-104))
    }

    fn is_nan(self) -> bool {
        self.hi.is_nan()
    }
    fn is_infinite(self) -> bool {
        self.hi.is_infinite()
    }
    fn is_finite(self) -> bool {
        self.hi.is_finite()
    }
    fn is_normal(self) -> bool {
        self.hi.is_normal()
    }
    fn classify(self) -> FpCategory {
        self.hi.classify()
    }
    fn is_sign_positive(self) -> bool {
        self.hi.is_sign_positive()
    }
    fn is_sign_negative(self) -> bool {
        self.hi.is_sign_negative()
    }

    fn floor(self) -> Self {
        let h = self.hi.floor();
        if h == self.hi {
            Wide::renorm(h, self.lo.floor())
        } else {
            Wide::new(h)
        }
    }
    fn ceil(self) -> Self {
        -(-self).floor()
    }
    fn round(self) -> Self {
        if self.hi >= 0.0 {
            (self + Wide::new(0.5)).floor()
        } else {
            -((-self) + Wide::new(0.5)).floor()
        }
    }
    fn trunc(self) -> Self {
        if self.hi >= 0.0 {
            self.floor()
        } else {
            self.ceil()
        }
    }
    fn fract(self) -> Self {
        self - self.trunc()
    }

    fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }
    fn signum(self) -> Self {
        Wide::new(self.hi.signum())
    }
    fn max(self, other: Self) -> Self {
        if other > self || self.is_nan() {
            other
        } else {
            self
        }
    }
    fn min(self, other: Self) -> Self {
        if other < self || self.is_nan() {
            other
        } else {
            self
        }
    }
    fn abs_sub(self, other: Self) -> Self {
        if self > other {
            self - other
        } else {
            Wide::zero()
        }
    }

    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }
    fn recip(self) -> Self {
        Wide::one() / self
    }
    fn powi(self, n: i32) -> Self {
        let mut acc = Wide::one();
        let mut base = self;
        let mut e = n.unsigned_abs();
        while e > 0 {
            if e & 1 == 1 {
                acc *= base;
            }
            base *= base;
            e >>= 1;
        }
        if n < 0 {
            acc.recip()
        } else {
            acc
        }
    }
    fn powf(self, n: Self) -> Self {
        (n * self.ln()).exp()
    }
    fn sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return if self.hi == 0.0 { Wide::zero() } else { Wide::nan() };
        }
        // One Newton step from the f64 root doubles the digits.
        let x = 1.0 / self.hi.sqrt();
        let ax = self.hi * x;
        let ax2 = Wide::new(ax) * Wide::new(ax);
        Wide::new(ax) + Wide::new((self - ax2).hi * (x * 0.5))
    }

    fn exp(self) -> Self {
        exp(self)
    }
    fn exp2(self) -> Self {
        exp(self * Wide::LN_2())
    }
    fn exp_m1(self) -> Self {
        exp(self) - Wide::one()
    }
    fn ln(self) -> Self {
        ln(self)
    }
    fn ln_1p(self) -> Self {
        ln(self + Wide::one())
    }
    fn log(self, base: Self) -> Self {
        ln(self) / ln(base)
    }
    fn log2(self) -> Self {
        ln(self) / Wide::LN_2()
    }
    fn log10(self) -> Self {
        ln(self) / Wide::LN_10()
    }

    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }

    fn integer_decode(self) -> (u64, i16, i8) {
        self.hi.integer_decode()
    }
}

const EXP_HALVINGS: i32 = 10;

fn exp(x: Wide) -> Wide {
    let h = x.hi;
    if h.is_nan() {
        return Wide::nan();
    }
    if h > 709.0 {
        return Wide::infinity();
    }
    if h < -745.0 {
        return Wide::zero();
    }
    // x = k ln2 + r with |r| <= ln2 / 2; r is shrunk by 2^10, expm1 is
    // summed, then squared back up as (1 + s)^2 - 1 = s (s + 2) so the small
    // part keeps its digits.
    let k = (h / std::f64::consts::LN_2).round();
    let r = (x - Wide::LN_2() * Wide::new(k)).scale2(-EXP_HALVINGS);
    let mut term = r;
    let mut s = r;
    for n in 2..=12 {
        term = term * r / Wide::new(n as f64);
        s += term;
    }
    for _ in 0..EXP_HALVINGS {
        s = s * (s + Wide::new(2.0));
    }
    // Two factors so neither overflows near the ends of the range.
    let k = k as i32;
    (s + Wide::one()).scale2(k / 2).scale2(k - k / 2)
}

fn ln(x: Wide) -> Wide {
    let h = x.hi;
    if h.is_nan() || h < 0.0 {
        return Wide::nan();
    }
    if h == 0.0 {
        return Wide::neg_infinity();
    }
    if h.is_infinite() {
        return Wide::infinity();
    }
    // Newton on exp(y) = x, doubling the correct digits each step.
    let mut y = Wide::new(h.ln());
    for _ in 0..2 {
        y = y + x * exp(-y) - Wide::one();
    }
    y
}

/// `erf(x) = 2/sqrt(pi) exp(-x^2) sum_n 2^n x^(2n+1) / (1*3*...*(2n+1))`,
/// a series of same-signed terms, so no cancellation at any `x`.
fn erf(x: Wide) -> Wide {
    let a = x.hi.abs();
    if a.is_nan() {
        return Wide::nan();
    }
    if a >= 10.0 {
        // erfc(10) is below 1e-44.
        return Wide::new(x.hi.signum());
    }
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    loop {
        n += 1.0;
        term = term * x2 * Wide::new(2.0) / Wide::new(2.0 * n + 1.0);
        sum += term;
        if term.hi.abs() <= 1e-34 * sum.hi.abs() {
            break;
        }
    }
    Wide::FRAC_2_SQRT_PI() * exp(-x2) * sum
}

impl Scalar for Wide {
    const DTYPE: &'static str = "f64x2";
    const BYTES: usize = 16;

    fn erf(self) -> Self {
        erf(self)
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Wide,
        a: *const Wide,
        rsa: isize,
        csa: isize,
        b: *const Wide,
        rsb: isize,
        csb: isize,
        beta: Wide,
        c: *mut Wide,
        rsc: isize,
        csc: isize,
    ) {
        for i in 0..m as isize {
            for j in 0..n as isize {
                let mut acc = Wide::zero();
                for p in 0..k as isize {
                    acc += *a.offset(i * rsa + p * csa) * *b.offset(p * rsb + j * csb);
                }
                let out = c.offset(i * rsc + j * csc);
                *out = if beta.is_zero() { alpha * acc } else { alpha * acc + beta * *out };
            }
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.hi.to_le_bytes());
        out.extend_from_slice(&self.lo.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let word = |i: usize| f64::from_le_bytes(bytes[i..i + 8].try_into().expect("8 bytes"));
        Wide::from_parts(word(0), word(8))
    }
}

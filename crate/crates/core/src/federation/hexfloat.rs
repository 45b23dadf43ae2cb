//! C99 / Python-style hexadecimal float text (`0x1.999999999999ap-4`).
//!
//! Formatting matches Python's `float.hex`; parsing accepts any hex float
//! whose value is exactly representable as an `f64`.

use crate::error::{Error, Result};

const MANTISSA_BITS: u32 = 52;
const EXP_BIAS: i64 = 1023;

pub fn to_hex(value: f64) -> String {
    if value.is_nan() {
        return "nan".to_string();
    }
    if value.is_infinite() {
        return if value > 0.0 { "inf" } else { "-inf" }.to_string();
    }
    let bits = value.to_bits();
    let sign = if bits >> 63 == 1 { "-" } else { "" };
    let exp_bits = ((bits >> MANTISSA_BITS) & 0x7ff) as i64;
    let mantissa = bits & ((1u64 << MANTISSA_BITS) - 1);
    if exp_bits == 0 && mantissa == 0 {
        return format!("{sign}0x0.0p+0");
    }
    let (lead, exp) = if exp_bits == 0 { (0, 1 - EXP_BIAS) } else { (1, exp_bits - EXP_BIAS) };
    let exp_sign = if exp < 0 { '-' } else { '+' };
    format!("{sign}0x{lead}.{mantissa:013x}p{exp_sign}{}", exp.abs())
}

/// `2^e` for `e` in the representable range.
fn pow2(e: i64) -> f64 {
    if e >= -1022 {
        f64::from_bits(((e + EXP_BIAS) as u64) << MANTISSA_BITS)
    } else {
        f64::from_bits(1u64 << (e + 1074))
    }
}

pub fn from_hex(text: &str) -> Result<f64> {
    let bad = || Error::Parse(format!("invalid hex float {text:?}"));
    match text {
        "inf" | "+inf" => return Ok(f64::INFINITY),
        "-inf" => return Ok(f64::NEG_INFINITY),
        _ => {}
    }
    let (negative, rest) = match text.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, text.strip_prefix('+').unwrap_or(text)),
    };
    let rest = rest.strip_prefix("0x").or_else(|| rest.strip_prefix("0X")).ok_or_else(bad)?;
    let (digits, exp_text) = rest.split_once(['p', 'P']).ok_or_else(bad)?;
    let exp: i64 = exp_text.parse().map_err(|_| bad())?;
    let (int_part, frac_part) = digits.split_once('.').unwrap_or((digits, ""));
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(bad());
    }
    let frac_part = frac_part.trim_end_matches('0');
    let mut mantissa: u128 = 0;
    for c in int_part.chars().chain(frac_part.chars()) {
        let d = c.to_digit(16).ok_or_else(bad)? as u128;
        mantissa = mantissa.checked_mul(16).and_then(|m| m.checked_add(d)).ok_or_else(bad)?;
    }
    let mut exp = exp - 4 * frac_part.len() as i64;
    if mantissa == 0 {
        return Ok(if negative { -0.0 } else { 0.0 });
    }
    let tz = mantissa.trailing_zeros();
    mantissa >>= tz;
    exp += tz as i64;
    if 128 - mantissa.leading_zeros() > 53 {
        return Err(Error::Parse(format!("hex float {text:?} exceeds f64 precision")));
    }
    let top = exp + (127 - mantissa.leading_zeros()) as i64;
    if top > 1023 || exp < -1074 {
        return Err(Error::Parse(format!("hex float {text:?} out of f64 range")));
    }
    let m = mantissa as f64;
    // Two exact power-of-two scalings keep intermediates normal.
    let value = if exp < -1022 {
        m * pow2(-1022) * pow2(exp + 1022)
    } else if exp > 1023 {
        m * pow2(1023) * pow2(exp - 1023)
    } else {
        m * pow2(exp)
    };
    Ok(if negative { -value } else { value })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matches_python_float_hex() {
        assert_eq!(to_hex(1.0), "0x1.0000000000000p+0");
        assert_eq!(to_hex(0.1), "0x1.999999999999ap-4");
        assert_eq!(to_hex(-2.5), "-0x1.4000000000000p+1");
        assert_eq!(to_hex(0.0), "0x0.0p+0");
        assert_eq!(to_hex(-0.0), "-0x0.0p+0");
        assert_eq!(to_hex(5e-324), "0x0.0000000000001p-1022");
        assert_eq!(to_hex(f64::MAX), "0x1.fffffffffffffp+1023");
        assert_eq!(to_hex(f64::INFINITY), "inf");
    }

    #[test]
    fn parses_loose_forms() {
        assert_eq!(from_hex("0x1p-1").unwrap(), 0.5);
        assert_eq!(from_hex("0x1.8p+1").unwrap(), 3.0);
        assert_eq!(from_hex("0xAp0").unwrap(), 10.0);
        assert_eq!(from_hex("-0x.8p0").unwrap(), -0.5);
        assert!(from_hex("inf").unwrap().is_infinite());
        assert!(from_hex("1.5").is_err());
        assert!(from_hex("0x1.0000000000000001p0").is_err());
        assert!(from_hex("0x1p+1024").is_err());
        assert!(from_hex("0xzp0").is_err());
    }

    proptest! {
        #[test]
        fn round_trips_every_bit_pattern(bits in any::<u64>()) {
            let v = f64::from_bits(bits);
            prop_assume!(!v.is_nan());
            let back = from_hex(&to_hex(v)).unwrap();
            prop_assert_eq!(back.to_bits(), v.to_bits());
        }
    }
}

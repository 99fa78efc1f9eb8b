//! C99-style hexadecimal `f64` text (`0x1.8p+1`), exact in both directions.

pub fn format(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let bits = x.to_bits();
    let sign = if bits >> 63 == 1 { "-" } else { "" };
    let exp = ((bits >> 52) & 0x7ff) as i32;
    let mant = bits & ((1u64 << 52) - 1);
    let (lead, e) = match exp {
        0 if mant == 0 => return format!("{sign}0x0p+0"),
        0 => (0, -1022),
        _ => (1, exp - 1023),
    };
    let frac = format!("{mant:013x}");
    let frac = frac.trim_end_matches('0');
    if frac.is_empty() {
        format!("{sign}0x{lead}p{e:+}")
    } else {
        format!("{sign}0x{lead}.{frac}p{e:+}")
    }
}

pub fn parse(s: &str) -> Option<f64> {
    match s {
        "nan" => return Some(f64::NAN),
        "inf" => return Some(f64::INFINITY),
        "-inf" => return Some(f64::NEG_INFINITY),
        _ => {}
    }
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, s),
    };
    let body = body.strip_prefix("0x")?;
    let (mant, exp) = body.split_once('p')?;
    let exp: i32 = exp.parse().ok()?;
    let (int, frac) = mant.split_once('.').unwrap_or((mant, ""));
    if int.is_empty() || int.len() + frac.len() > 15 {
        return None;
    }
    let digits = format!("{int}{frac}");
    let m = u64::from_str_radix(&digits, 16).ok()?;
    if m >= 1 << 53 {
        return None;
    }
    let v = ldexp(m as f64, exp - 4 * frac.len() as i32);
    Some(if neg { -v } else { v })
}

/// `x · 2^e` without intermediate overflow or underflow of the power.
fn ldexp(x: f64, e: i32) -> f64 {
    let half = e / 2;
    x * 2f64.powi(half) * 2f64.powi(e - half)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_strings() {
        assert_eq!(format(1.0), "0x1p+0");
        assert_eq!(format(3.0), "0x1.8p+1");
        assert_eq!(format(-0.5), "-0x1p-1");
        assert_eq!(format(0.0), "0x0p+0");
        assert_eq!(format(-0.0), "-0x0p+0");
        assert_eq!(format(f64::MIN_POSITIVE / 4.0), "0x0.4p-1022");
        assert_eq!(parse("0x1.8p+1"), Some(3.0));
        assert_eq!(parse("0x1.999999999999ap-4"), Some(0.1));
        assert_eq!(parse("0x1.8"), None);
        assert_eq!(parse("1.5"), None);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let samples = [
            0.1,
            -1e-300,
            f64::MAX,
            f64::MIN_POSITIVE,
            5e-324,
            std::f64::consts::PI,
            -0.0,
            123456.789,
            f64::INFINITY,
            f64::NEG_INFINITY,
        ];
        for x in samples {
            assert_eq!(parse(&format(x)).unwrap().to_bits(), x.to_bits(), "{x}");
        }
        let mut state = 0x1234_5678_9abc_def0u64;
        for _ in 0..10_000 {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            let x = f64::from_bits(state);
            if x.is_nan() {
                assert!(parse(&format(x)).unwrap().is_nan());
            } else {
                assert_eq!(parse(&format(x)).unwrap().to_bits(), x.to_bits(), "{x:e}");
            }
        }
    }
}

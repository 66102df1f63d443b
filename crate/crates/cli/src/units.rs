/// Parses byte counts such as `4096`, `64KiB`, `1GiB`, `2M` or `0x1000`.
/// Suffixes are binary whether or not they carry the `i`.
pub fn parse_bytes(s: &str) -> Result<u64, String> {
    let t = s.trim();
    if let Some(hex) = t.strip_prefix("0x") {
        return u64::from_str_radix(hex, 16).map_err(|e| format!("`{s}`: {e}"));
    }
    let split = t.find(|c: char| !c.is_ascii_digit()).unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let n: u64 = num.parse().map_err(|_| format!("`{s}` is not a byte count"))?;
    let shift = match unit.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 0,
        "k" | "kb" | "kib" => 10,
        "m" | "mb" | "mib" => 20,
        "g" | "gb" | "gib" => 30,
        "t" | "tb" | "tib" => 40,
        other => return Err(format!("unknown unit `{other}` in `{s}`")),
    };
    n.checked_mul(1 << shift).ok_or_else(|| format!("`{s}` overflows"))
}

/// Like [`parse_bytes`] but rejects zero.
pub fn parse_footprint(s: &str) -> Result<u64, String> {
    match parse_bytes(s)? {
        0 => Err("footprint must be non-zero".into()),
        n => Ok(n),
    }
}

pub fn human_bytes(n: f64) -> String {
    const UNITS: [&str; 5] = ["B", "KiB", "MiB", "GiB", "TiB"];
    let mut v = n;
    let mut u = 0;
    while v >= 1024.0 && u < UNITS.len() - 1 {
        v /= 1024.0;
        u += 1;
    }
    if u == 0 {
        format!("{v:.0} {}", UNITS[u])
    } else {
        format!("{v:.2} {}", UNITS[u])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn units() {
        assert_eq!(parse_bytes("4096"), Ok(4096));
        assert_eq!(parse_bytes("64KiB"), Ok(64 << 10));
        assert_eq!(parse_bytes("1GiB"), Ok(1 << 30));
        assert_eq!(parse_bytes("2M"), Ok(2 << 20));
        assert_eq!(parse_bytes("10gb"), Ok(10 << 30));
        assert_eq!(parse_bytes("0x1000"), Ok(4096));
        assert!(parse_bytes("1XB").is_err());
        assert!(parse_bytes("").is_err());
        assert!(parse_footprint("0").is_err());
        assert!(parse_footprint("0GiB").is_err());
    }

    #[test]
    fn human() {
        assert_eq!(human_bytes(512.0), "512 B");
        assert_eq!(human_bytes((1u64 << 30) as f64), "1.00 GiB");
    }
}

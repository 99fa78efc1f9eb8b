//! Versioned plain-text persistence of Lyapunov candidates.
//!
//! Every `f64` is stored as a hexadecimal float and every MPFR coefficient as
//! `precision:radix-16 mantissa`, so a reload reproduces the candidate bit for bit.
//!
//! ```text
//! koopman-roa-candidate 1
//! system <name>
//! dim <n>
//! domain_lower <n hex floats>
//! domain_upper <n hex floats>
//! eta <hex>
//! points <m>
//! <n hex floats>                 × m
//! terms <k>
//! term
//! lambda <re> <im>
//! weight <hex>
//! w <re₁> <im₁> … <reₙ> <imₙ>
//! solve_bits <bits>
//! fallback <0|1>
//! log10_condition <hex>
//! centered <0|1>
//! coefficients <m>
//! <mpfr re> <mpfr im>            × m
//! end
//! ```

use std::sync::Arc;

use koopman_roa::dynsys::{DomainBox, VectorField};
use koopman_roa::generator::ApproxEigenfunction;
use koopman_roa::hp::{float_from_hex, float_to_hex};
use koopman_roa::kernel::{CollocationSet, KernelExpansion, TaylorKernel};
use koopman_roa::lyapunov::{LyapunovCandidate, Term};
use num_complex::Complex64;
use rug::Complex;

use crate::{hexfloat, CliError};

pub const MAGIC: &str = "koopman-roa-candidate";
pub const VERSION: u32 = 1;

pub fn write(candidate: &LyapunovCandidate) -> String {
    let vf = candidate.vector_field();
    let hexes = |v: &[f64]| v.iter().map(|x| hexfloat::format(*x)).collect::<Vec<_>>().join(" ");
    let cplx = |z: Complex64| format!("{} {}", hexfloat::format(z.re), hexfloat::format(z.im));
    let first = &candidate.terms()[0].eigenfunction;
    let points = first.points();
    let mut out = String::new();
    let mut line = |s: String| {
        out.push_str(&s);
        out.push('\n');
    };
    line(format!("{MAGIC} {VERSION}"));
    line(format!("system {}", vf.name()));
    line(format!("dim {}", vf.dim()));
    line(format!("domain_lower {}", hexes(vf.domain().lower())));
    line(format!("domain_upper {}", hexes(vf.domain().upper())));
    line(format!("eta {}", hexfloat::format(first.kernel().eta())));
    line(format!("points {}", points.len()));
    for q in points.points() {
        line(hexes(q));
    }
    line(format!("terms {}", candidate.terms().len()));
    for t in candidate.terms() {
        let ef = &t.eigenfunction;
        line("term".into());
        line(format!("lambda {}", cplx(ef.lambda())));
        line(format!("weight {}", hexfloat::format(t.weight)));
        line(format!("w {}", ef.w().iter().map(|z| cplx(*z)).collect::<Vec<_>>().join(" ")));
        line(format!("solve_bits {}", ef.solve_bits()));
        line(format!("fallback {}", u8::from(ef.fallback_used())));
        line(format!("log10_condition {}", hexfloat::format(ef.log10_condition())));
        line(format!("centered {}", u8::from(ef.is_centered())));
        line(format!("coefficients {}", ef.coefficients().len()));
        for c in ef.coefficients() {
            line(format!("{} {}", float_to_hex(c.real()), float_to_hex(c.imag())));
        }
    }
    line("end".into());
    out
}

struct Reader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    line_no: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl std::fmt::Display) -> CliError {
        CliError::Input(format!("candidate line {}: {msg}", self.line_no))
    }

    fn next(&mut self) -> Result<&'a str, CliError> {
        match self.lines.next() {
            Some((i, l)) => {
                self.line_no = i + 1;
                Ok(l)
            }
            None => {
                self.line_no += 1;
                Err(self.err("unexpected end of file"))
            }
        }
    }

    /// Next line, which must start with `tag`; returns the remaining fields.
    fn tagged(&mut self, tag: &str) -> Result<Vec<&'a str>, CliError> {
        let l = self.next()?;
        let mut parts = l.split_whitespace();
        if parts.next() != Some(tag) {
            return Err(self.err(format!("expected `{tag}`")));
        }
        Ok(parts.collect())
    }

    fn count(&mut self, tag: &str) -> Result<usize, CliError> {
        let f = self.tagged(tag)?;
        match f.as_slice() {
            [v] => v.parse().map_err(|_| self.err(format!("bad count `{v}`"))),
            _ => Err(self.err(format!("`{tag}` takes one value"))),
        }
    }

    fn floats(&self, fields: &[&str], expected: usize) -> Result<Vec<f64>, CliError> {
        if fields.len() != expected {
            return Err(self.err(format!("expected {expected} values, found {}", fields.len())));
        }
        fields.iter().map(|s| hexfloat::parse(s).ok_or_else(|| self.err(format!("bad hex float `{s}`")))).collect()
    }

    fn float(&mut self, tag: &str) -> Result<f64, CliError> {
        let f = self.tagged(tag)?;
        Ok(self.floats(&f, 1)?[0])
    }

    fn complexes(&self, fields: &[&str], count: usize) -> Result<Vec<Complex64>, CliError> {
        let v = self.floats(fields, 2 * count)?;
        Ok(v.chunks(2).map(|c| Complex64::new(c[0], c[1])).collect())
    }
}

/// Parsed candidate file, before it is attached to a vector field.
#[derive(Debug, Clone)]
pub struct StoredCandidate {
    pub system: String,
    pub domain: DomainBox,
    pub eta: f64,
    pub points: Vec<Vec<f64>>,
    pub terms: Vec<StoredTerm>,
}

#[derive(Debug, Clone)]
pub struct StoredTerm {
    pub lambda: Complex64,
    pub weight: f64,
    pub w: Vec<Complex64>,
    pub solve_bits: u32,
    pub fallback: bool,
    pub log10_condition: f64,
    pub centered: bool,
    pub coefficients: Vec<Complex>,
}

pub fn parse(text: &str) -> Result<StoredCandidate, CliError> {
    let mut r = Reader {
        lines: text.lines().enumerate(),
        line_no: 0,
    };
    let header = r.next()?;
    match header.split_once(' ') {
        Some((MAGIC, v)) if v == VERSION.to_string() => {}
        Some((MAGIC, v)) => return Err(r.err(format!("unsupported version {v}"))),
        _ => return Err(r.err("not a candidate file")),
    }
    let sys = r.next()?;
    let system = sys.strip_prefix("system ").ok_or_else(|| r.err("expected `system`"))?.to_string();
    let n = r.count("dim")?;
    let f = r.tagged("domain_lower")?;
    let lower = r.floats(&f, n)?;
    let f = r.tagged("domain_upper")?;
    let upper = r.floats(&f, n)?;
    let domain = DomainBox::new(lower, upper).map_err(|e| r.err(e))?;
    let eta = r.float("eta")?;
    let m = r.count("points")?;
    let mut points = Vec::with_capacity(m);
    for _ in 0..m {
        let l = r.next()?;
        let f: Vec<&str> = l.split_whitespace().collect();
        points.push(r.floats(&f, n)?);
    }
    let k = r.count("terms")?;
    let mut terms = Vec::with_capacity(k);
    for _ in 0..k {
        r.tagged("term")?;
        let f = r.tagged("lambda")?;
        let lambda = r.complexes(&f, 1)?[0];
        let weight = r.float("weight")?;
        let f = r.tagged("w")?;
        let w = r.complexes(&f, n)?;
        let solve_bits = r.count("solve_bits")? as u32;
        let fallback = r.count("fallback")? != 0;
        let log10_condition = r.float("log10_condition")?;
        let centered = r.count("centered")? != 0;
        let mc = r.count("coefficients")?;
        if mc != m {
            return Err(r.err(format!("{mc} coefficients for {m} points")));
        }
        let mut coefficients = Vec::with_capacity(m);
        for _ in 0..m {
            let l = r.next()?;
            let f: Vec<&str> = l.split_whitespace().collect();
            let [re, im] = f.as_slice() else {
                return Err(r.err("expected two MPFR values"));
            };
            let re = float_from_hex(re).ok_or_else(|| r.err(format!("bad MPFR value `{re}`")))?;
            let im = float_from_hex(im).ok_or_else(|| r.err(format!("bad MPFR value `{im}`")))?;
            let prec = (re.prec(), im.prec());
            coefficients.push(Complex::with_val(prec, (re, im)));
        }
        terms.push(StoredTerm {
            lambda,
            weight,
            w,
            solve_bits,
            fallback,
            log10_condition,
            centered,
            coefficients,
        });
    }
    if r.next()? != "end" {
        return Err(r.err("expected `end`"));
    }
    Ok(StoredCandidate {
        system,
        domain,
        eta,
        points,
        terms,
    })
}

impl StoredCandidate {
    /// Rebuilds the candidate on `vf`, which must be the system it was built for.
    pub fn attach(self, vf: &VectorField) -> Result<LyapunovCandidate, CliError> {
        if self.system != vf.name() || &self.domain != vf.domain() {
            return Err(CliError::Input(format!(
                "candidate was built for `{}` on a different domain or system than `{}`",
                self.system,
                vf.name()
            )));
        }
        let num = |e: koopman_roa::Error| CliError::Numerical(e.to_string());
        let kernel = TaylorKernel::new(self.eta).map_err(num)?;
        let set = Arc::new(CollocationSet::new(self.points, vf.domain()).map_err(num)?);
        let reach = Some(vf.domain().radius());
        let mut terms = Vec::with_capacity(self.terms.len());
        for t in self.terms {
            let expansion = KernelExpansion::new(kernel, set.clone(), t.w, t.coefficients, reach).map_err(num)?;
            let ef = ApproxEigenfunction::from_parts(t.lambda, expansion, t.fallback, t.solve_bits, t.log10_condition, vf)
                .map_err(num)?
                .centered(t.centered);
            terms.push(Term {
                eigenfunction: ef,
                weight: t.weight,
            });
        }
        LyapunovCandidate::from_terms(vf, terms).map_err(num)
    }
}

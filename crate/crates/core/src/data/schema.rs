//! Column roles of a farm record file and the invalid-record rules that go
//! with it. Schema files are plain `key = value` text; `rule` may repeat.

use std::fmt::{self, Write as _};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cmp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
}

impl Cmp {
    fn symbol(self) -> &'static str {
        match self {
            Cmp::Lt => "<",
            Cmp::Le => "<=",
            Cmp::Gt => ">",
            Cmp::Ge => ">=",
            Cmp::Eq => "==",
        }
    }

    pub fn holds(self, lhs: f64, rhs: f64) -> bool {
        match self {
            Cmp::Lt => lhs < rhs,
            Cmp::Le => lhs <= rhs,
            Cmp::Gt => lhs > rhs,
            Cmp::Ge => lhs >= rhs,
            Cmp::Eq => lhs == rhs,
        }
    }
}

/// One comparison, e.g. `abs(Wdir) > 180`.
#[derive(Clone, Debug, PartialEq)]
pub struct Term {
    pub channel: String,
    pub abs: bool,
    pub cmp: Cmp,
    pub value: f64,
}

/// A record is invalid when every term of some rule holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Rule {
    pub terms: Vec<Term>,
}

impl Rule {
    /// Parses `term [& term ...]` where `term` is `[abs(]channel[)] op number`.
    pub fn parse(text: &str) -> Result<Rule> {
        let terms = text.split('&').map(|t| parse_term(t.trim())).collect::<Result<Vec<_>>>()?;
        if terms.is_empty() {
            return Err(Error::config(format!("empty rule `{text}`")));
        }
        Ok(Rule { terms })
    }
}

fn parse_term(text: &str) -> Result<Term> {
    let bad = || Error::config(format!("cannot parse rule term `{text}`"));
    // two-character operators first
    let (pos, cmp, width) = ["<=", ">=", "==", "<", ">"]
        .iter()
        .find_map(|op| text.find(op).map(|p| (p, *op, op.len())))
        .ok_or_else(bad)?;
    let cmp = match cmp {
        "<=" => Cmp::Le,
        ">=" => Cmp::Ge,
        "==" => Cmp::Eq,
        "<" => Cmp::Lt,
        _ => Cmp::Gt,
    };
    let lhs = text[..pos].trim();
    let value: f64 = text[pos + width..].trim().parse().map_err(|_| bad())?;
    let (channel, abs) = match lhs.strip_prefix("abs(").and_then(|s| s.strip_suffix(')')) {
        Some(inner) => (inner.trim(), true),
        None => (lhs, false),
    };
    if channel.is_empty() || channel.contains(|c: char| c.is_whitespace() || c == '(' || c == ')') {
        return Err(bad());
    }
    Ok(Term { channel: channel.to_string(), abs, cmp, value })
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.terms.iter().enumerate() {
            if i > 0 {
                write!(f, " & ")?;
            }
            if t.abs {
                write!(f, "abs({}) {} {:?}", t.channel, t.cmp.symbol(), t.value)?;
            } else {
                write!(f, "{} {} {:?}", t.channel, t.cmp.symbol(), t.value)?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schema {
    pub turbine_column: String,
    pub day_column: String,
    pub time_column: String,
    /// Measured numeric columns, in file order.
    pub channels: Vec<String>,
    pub target: String,
    pub interval_minutes: u32,
    /// Also feed turbine id, day number and minute-of-day as input channels.
    pub keys_as_channels: bool,
    pub rules: Vec<Rule>,
}

impl Schema {
    /// SDWPF layout: ten measured columns plus the three key columns, 13 channels in all.
    pub fn sdwpf() -> Schema {
        let channels = ["Wspd", "Wdir", "Etmp", "Itmp", "Ndir", "Pab1", "Pab2", "Pab3", "Prtv", "Patv"];
        Schema {
            turbine_column: "TurbID".into(),
            day_column: "Day".into(),
            time_column: "Tmstamp".into(),
            channels: channels.iter().map(|s| s.to_string()).collect(),
            target: "Patv".into(),
            interval_minutes: 10,
            keys_as_channels: true,
            rules: default_rules("Patv", "Wspd", Some("Wdir"), Some("Ndir")),
        }
    }

    /// SDWPF-style keys with arbitrary measured channels and no rules.
    pub fn with_channels(channels: Vec<String>, target: &str) -> Schema {
        Schema {
            turbine_column: "TurbID".into(),
            day_column: "Day".into(),
            time_column: "Tmstamp".into(),
            channels,
            target: target.into(),
            interval_minutes: 10,
            keys_as_channels: false,
            rules: Vec::new(),
        }
    }

    /// Input channel names in tensor order.
    pub fn input_channels(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.keys_as_channels {
            out.extend([self.turbine_column.clone(), self.day_column.clone(), self.time_column.clone()]);
        }
        out.extend(self.channels.iter().cloned());
        out
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len() + if self.keys_as_channels { 3 } else { 0 }
    }

    pub fn slots_per_day(&self) -> u64 {
        (24 * 60 / self.interval_minutes) as u64
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::config("schema declares no channels"));
        }
        if !self.channels.contains(&self.target) {
            return Err(Error::config(format!("target `{}` is not a declared channel", self.target)));
        }
        if self.interval_minutes == 0 || (24 * 60) % self.interval_minutes != 0 {
            return Err(Error::config(format!("interval of {} minutes does not divide a day", self.interval_minutes)));
        }
        let names = self.input_channels();
        let mut all: Vec<&String> = names.iter().collect();
        if !self.keys_as_channels {
            all.extend([&self.turbine_column, &self.day_column, &self.time_column]);
        }
        for (i, a) in all.iter().enumerate() {
            if all[i + 1..].contains(a) {
                return Err(Error::config(format!("column `{a}` declared twice")));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Schema> {
        let mut s = Schema::with_channels(Vec::new(), "");
        let mut target = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .filter(|(k, _)| !k.contains(['<', '>']))
                .ok_or_else(|| Error::config(format!("schema line {}: expected `key = value`", i + 1)))?;
            let v = v.trim();
            match k.trim() {
                "turbine" => s.turbine_column = v.into(),
                "day" => s.day_column = v.into(),
                "time" => s.time_column = v.into(),
                "channels" => s.channels = v.split(',').map(|c| c.trim().to_string()).filter(|c| !c.is_empty()).collect(),
                "target" => target = Some(v.to_string()),
                "interval_minutes" => {
                    s.interval_minutes = v.parse().map_err(|_| Error::config(format!("bad interval `{v}`")))?
                }
                "keys_as_channels" => {
                    s.keys_as_channels = v.parse().map_err(|_| Error::config(format!("bad flag `{v}`")))?
                }
                "rule" => s.rules.push(Rule::parse(v)?),
                other => return Err(Error::config(format!("unknown schema key `{other}`"))),
            }
        }
        s.target = target.ok_or_else(|| Error::config("schema has no target"))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Schema> {
        Schema::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "turbine = {}", self.turbine_column);
        let _ = writeln!(out, "day = {}", self.day_column);
        let _ = writeln!(out, "time = {}", self.time_column);
        let _ = writeln!(out, "channels = {}", self.channels.join(","));
        let _ = writeln!(out, "target = {}", self.target);
        let _ = writeln!(out, "interval_minutes = {}", self.interval_minutes);
        let _ = writeln!(out, "keys_as_channels = {}", self.keys_as_channels);
        for r in &self.rules {
            let _ = writeln!(out, "rule = {r}");
        }
        out
    }
}

/// Physically implausible readings: negative power, no power in usable
/// wind, and out-of-range direction angles.
pub fn default_rules(target: &str, wind_speed: &str, wind_dir: Option<&str>, nacelle_dir: Option<&str>) -> Vec<Rule> {
    let mut rules = vec![
        Rule::parse(&format!("{target} < 0")).unwrap(),
        Rule::parse(&format!("{target} <= 0 & {wind_speed} > 2.5")).unwrap(),
    ];
    if let Some(d) = wind_dir {
        rules.push(Rule::parse(&format!("abs({d}) > 180")).unwrap());
    }
    if let Some(d) = nacelle_dir {
        rules.push(Rule::parse(&format!("abs({d}) > 720")).unwrap());
    }
    rules
}

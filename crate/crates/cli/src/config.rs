//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are
//! errors, and every error names the offending line. Missing keys keep the
//! desk-scale defaults.

use std::fmt;

use neld::{ExperimentConfig, SchemeId, SoileBNoise};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            write!(f, "config: {}", self.message)
        } else {
            write!(f, "config line {}: {}", self.line, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

pub const KEYS: [&str; 15] = [
    "time_step",
    "simulation_time",
    "number_of_particles",
    "box_side_length",
    "friction",
    "inverse_temperature",
    "flow_rates",
    "equilibration_time",
    "runs",
    "ladder_levels",
    "schemes",
    "seed",
    "checkpoint_stride",
    "soile_b_noise",
    "use_cell_list",
];

fn parse_value<T: std::str::FromStr>(value: &str, line: usize, key: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError { line, message: format!("{key}: cannot parse '{value}': {e}") })
}

pub fn parse_schemes(list: &str) -> Result<Vec<SchemeId>, String> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<SchemeId>().map_err(|e| e.to_string()))
        .collect()
}

/// Parses a config file body, starting from the defaults.
pub fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut config = ExperimentConfig::default();
    let mut seen: Vec<&str> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (key, value) = body
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| ConfigError { line, message: format!("expected 'key = value', found '{body}'") })?;
        let Some(&known) = KEYS.iter().find(|&&k| k == key) else {
            return Err(ConfigError { line, message: format!("unknown key '{key}'") });
        };
        if seen.contains(&known) {
            return Err(ConfigError { line, message: format!("duplicate key '{key}'") });
        }
        seen.push(known);
        match known {
            "time_step" => config.dt_base = parse_value(value, line, key)?,
            "simulation_time" => config.t_end = parse_value(value, line, key)?,
            "number_of_particles" => config.particles = parse_value(value, line, key)?,
            "box_side_length" => config.box_side = parse_value(value, line, key)?,
            "friction" => config.gamma = parse_value(value, line, key)?,
            "inverse_temperature" => config.beta = parse_value(value, line, key)?,
            "flow_rates" => {
                let rates: Vec<f64> = value
                    .split(|c: char| c == ',' || c.is_whitespace())
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_value(s, line, key))
                    .collect::<Result<_, _>>()?;
                config.flow_rates = rates
                    .try_into()
                    .map_err(|_| ConfigError { line, message: "flow_rates needs exactly 3 values".into() })?;
            }
            "equilibration_time" => config.t_eq = parse_value(value, line, key)?,
            "runs" => config.runs = parse_value(value, line, key)?,
            "ladder_levels" => config.ladder_levels = parse_value(value, line, key)?,
            "schemes" => config.schemes = parse_schemes(value).map_err(|message| ConfigError { line, message })?,
            "seed" => config.seed = parse_value(value, line, key)?,
            "checkpoint_stride" => config.checkpoint_stride = parse_value(value, line, key)?,
            "soile_b_noise" => config.soile_b_noise = parse_value::<SoileBNoise>(value, line, key)?,
            "use_cell_list" => config.use_cell_list = parse_value(value, line, key)?,
            _ => unreachable!("every known key is handled"),
        }
    }
    config.validate().map_err(|e| ConfigError { line: 0, message: e.to_string() })?;
    Ok(config)
}

/// Renders every key; `parse(&render(c)) == c` for any valid `c`.
pub fn render(config: &ExperimentConfig) -> String {
    let schemes: Vec<&str> = config.schemes.iter().map(|s| s.name()).collect();
    let r = config.flow_rates;
    [
        format!("time_step = {:?}", config.dt_base),
        format!("simulation_time = {:?}", config.t_end),
        format!("number_of_particles = {}", config.particles),
        format!("box_side_length = {:?}", config.box_side),
        format!("friction = {:?}", config.gamma),
        format!("inverse_temperature = {:?}", config.beta),
        format!("flow_rates = {:?}, {:?}, {:?}", r[0], r[1], r[2]),
        format!("equilibration_time = {:?}", config.t_eq),
        format!("runs = {}", config.runs),
        format!("ladder_levels = {}", config.ladder_levels),
        format!("schemes = {}", schemes.join(",")),
        format!("seed = {}", config.seed),
        format!("checkpoint_stride = {}", config.checkpoint_stride),
        format!("soile_b_noise = {}", config.soile_b_noise.name()),
        format!("use_cell_list = {}", config.use_cell_list),
    ]
    .join("\n")
        + "\n"
}

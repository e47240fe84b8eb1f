//! Synthetic 2D editing tasks.
//!
//! Sources are drawn from a mixture of four isotropic Gaussians centred at
//! (±2, ±2) with standard deviation 0.25. Each instruction is a short phrase
//! in a fixed toy vocabulary; its integer code can always be decoded back
//! from the tokens.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::rng;

pub const MODE_STD: f64 = 0.25;
/// Mode centres indexed by move-to-mode code.
pub const MODE_CENTERS: [[f64; 2]; 4] = [[2.0, 2.0], [-2.0, 2.0], [-2.0, -2.0], [2.0, -2.0]];
pub const MAX_TOKENS: usize = 32;

pub const VOCAB: &[&str] = &[
    "move", "the", "point", "to", "upper", "lower", "left", "right", "mode", "reflect", "across",
    "x", "y", "axis", "translate", "by", "one", "unit", "up", "down",
];

pub fn token_id(word: &str) -> Result<usize, DataError> {
    VOCAB
        .iter()
        .position(|w| *w == word)
        .ok_or_else(|| DataError::UnknownToken(word.to_string()))
}

fn words(ids: &[usize]) -> Result<Vec<&'static str>, DataError> {
    ids.iter()
        .map(|&i| VOCAB.get(i).copied().ok_or(DataError::UnknownTokenId(i)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    MoveToMode,
    ReflectAxis,
    TranslateOffset,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::MoveToMode, Task::ReflectAxis, Task::TranslateOffset];

    pub fn name(self) -> &'static str {
        match self {
            Task::MoveToMode => "move-to-mode",
            Task::ReflectAxis => "reflect-axis",
            Task::TranslateOffset => "translate-offset",
        }
    }

    pub fn num_codes(self) -> usize {
        match self {
            Task::MoveToMode | Task::TranslateOffset => 4,
            Task::ReflectAxis => 2,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| DataError::UnknownTask(s.to_string()))
    }
}

const TRANSLATE_OFFSETS: [[f64; 2]; 4] = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]];

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction {
    pub task: Task,
    pub code: usize,
    pub tokens: Vec<usize>,
}

impl Instruction {
    pub fn new(task: Task, code: usize) -> Result<Self, DataError> {
        if code >= task.num_codes() {
            return Err(DataError::BadCode { task, code });
        }
        let phrase: Vec<&str> = match task {
            Task::MoveToMode => {
                let vertical = if code < 2 { "upper" } else { "lower" };
                let horizontal = if code == 0 || code == 3 { "right" } else { "left" };
                vec!["move", "the", "point", "to", "the", vertical, horizontal, "mode"]
            }
            Task::ReflectAxis => {
                let axis = if code == 0 { "x" } else { "y" };
                vec!["reflect", "the", "point", "across", "the", axis, "axis"]
            }
            Task::TranslateOffset => {
                let dir = ["right", "left", "up", "down"][code];
                vec!["translate", "the", "point", "by", "one", "unit", dir]
            }
        };
        let tokens = phrase.into_iter().map(token_id).collect::<Result<_, _>>()?;
        Ok(Self { task, code, tokens })
    }

    /// Recovers task and code from a token sequence.
    pub fn from_tokens(tokens: &[usize]) -> Result<Self, DataError> {
        if tokens.is_empty() || tokens.len() > MAX_TOKENS {
            return Err(DataError::BadLength(tokens.len()));
        }
        let w = words(tokens)?;
        let has = |word: &str| w.contains(&word);
        let decoded = match w[0] {
            "move" => {
                let upper = has("upper");
                let right = has("right");
                let code = match (upper, right) {
                    (true, true) => 0,
                    (true, false) => 1,
                    (false, false) => 2,
                    (false, true) => 3,
                };
                Instruction::new(Task::MoveToMode, code)?
            }
            "reflect" => Instruction::new(Task::ReflectAxis, if has("x") { 0 } else { 1 })?,
            "translate" => {
                let dir = ["right", "left", "up", "down"]
                    .iter()
                    .position(|d| has(d))
                    .ok_or_else(|| DataError::Undecodable(w.join(" ")))?;
                Instruction::new(Task::TranslateOffset, dir)?
            }
            _ => return Err(DataError::Undecodable(w.join(" "))),
        };
        Ok(Self {
            tokens: tokens.to_vec(),
            ..decoded
        })
    }

    pub fn text(&self) -> String {
        words(&self.tokens).map(|w| w.join(" ")).unwrap_or_default()
    }
}

pub fn nearest_mode(p: [f64; 2]) -> usize {
    nearest_of(p, &MODE_CENTERS)
}

fn nearest_of(p: [f64; 2], centers: &[[f64; 2]]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centers.iter().enumerate() {
        let d = dist_sq(p, *c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

pub fn dist_sq(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    dx * dx + dy * dy
}

/// Exact ground-truth edit of `source` under an instruction.
pub fn transform(instruction: &Instruction, source: [f64; 2]) -> [f64; 2] {
    let [x, y] = source;
    match instruction.task {
        Task::MoveToMode => {
            let from = MODE_CENTERS[nearest_mode(source)];
            let to = MODE_CENTERS[instruction.code];
            [to[0] + (x - from[0]), to[1] + (y - from[1])]
        }
        Task::ReflectAxis => {
            if instruction.code == 0 {
                [x, -y]
            } else {
                [-x, y]
            }
        }
        Task::TranslateOffset => {
            let o = TRANSLATE_OFFSETS[instruction.code];
            [x + o[0], y + o[1]]
        }
    }
}

/// Mode centres of the distribution edited points should lie on.
pub fn manifold_centers(instruction: &Instruction) -> Vec<[f64; 2]> {
    match instruction.task {
        Task::MoveToMode | Task::ReflectAxis => MODE_CENTERS.to_vec(),
        Task::TranslateOffset => {
            let o = TRANSLATE_OFFSETS[instruction.code];
            MODE_CENTERS.iter().map(|c| [c[0] + o[0], c[1] + o[1]]).collect()
        }
    }
}

/// Where the instruction asks the edited point to go.
pub fn instructed_center(instruction: &Instruction, source: [f64; 2]) -> [f64; 2] {
    match instruction.task {
        Task::MoveToMode => MODE_CENTERS[instruction.code],
        Task::ReflectAxis | Task::TranslateOffset => transform(instruction, source),
    }
}

/// Squared deviation of the attributes an edit must leave untouched.
pub fn preserved_deviation_sq(instruction: &Instruction, source: [f64; 2], edited: [f64; 2]) -> f64 {
    match instruction.task {
        Task::MoveToMode => {
            let from = MODE_CENTERS[nearest_mode(source)];
            let to = MODE_CENTERS[instruction.code];
            let src_off = [source[0] - from[0], source[1] - from[1]];
            let out_off = [edited[0] - to[0], edited[1] - to[1]];
            dist_sq(src_off, out_off)
        }
        Task::ReflectAxis => {
            let axis = if instruction.code == 0 { 0 } else { 1 };
            let d = edited[axis] - source[axis];
            d * d
        }
        Task::TranslateOffset => {
            let axis = if instruction.code < 2 { 1 } else { 0 };
            let d = edited[axis] - source[axis];
            d * d
        }
    }
}

pub fn manifold_distance(instruction: &Instruction, p: [f64; 2]) -> f64 {
    let centers = manifold_centers(instruction);
    dist_sq(p, centers[nearest_of(p, &centers)]).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditInstance {
    pub source: [f64; 2],
    pub instruction: Instruction,
    pub target: [f64; 2],
}

impl EditInstance {
    pub fn new(source: [f64; 2], instruction: Instruction) -> Self {
        let target = transform(&instruction, source);
        Self {
            source,
            instruction,
            target,
        }
    }
}

pub fn sample_source<R: Rng + ?Sized>(rng: &mut R) -> [f64; 2] {
    let c = MODE_CENTERS[rng.random_range(0..4)];
    [c[0] + MODE_STD * rng::normal(rng), c[1] + MODE_STD * rng::normal(rng)]
}

/// Deterministic dataset of `count` instances for `task`.
pub fn synth_dataset(task: &str, count: usize, seed: u64) -> Result<Vec<EditInstance>, DataError> {
    let task: Task = task.parse()?;
    let mut rng = rng::stream_for(seed, &[0xDA7A]);
    (0..count)
        .map(|_| {
            let source = sample_source(&mut rng);
            let code = rng.random_range(0..task.num_codes());
            Ok(EditInstance::new(source, Instruction::new(task, code)?))
        })
        .collect()
}

pub const DATASET_HEADER: &str = "# flowrl dataset v1: source_x source_y task code tokens target_x target_y";

/// One record per line; tokens are comma-separated ids. Floats use the
/// shortest representation that parses back to the same value.
pub fn write_dataset<W: Write>(data: &[EditInstance], mut w: W) -> Result<(), DataError> {
    writeln!(w, "{DATASET_HEADER}")?;
    for inst in data {
        let tokens: Vec<String> = inst.instruction.tokens.iter().map(usize::to_string).collect();
        writeln!(
            w,
            "{} {} {} {} {} {} {}",
            inst.source[0],
            inst.source[1],
            inst.instruction.task,
            inst.instruction.code,
            tokens.join(","),
            inst.target[0],
            inst.target[1]
        )?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<Vec<EditInstance>, DataError> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: &str| DataError::Parse {
            line: lineno + 1,
            msg: msg.to_string(),
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(parse_err("expected 7 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| parse_err("bad float"));
        let source = [num(fields[0])?, num(fields[1])?];
        let task: Task = fields[2].parse()?;
        let code: usize = fields[3].parse().map_err(|_| parse_err("bad code"))?;
        let tokens = fields[4]
            .split(',')
            .map(|t| t.parse::<usize>().map_err(|_| parse_err("bad token id")))
            .collect::<Result<Vec<_>, _>>()?;
        let instruction = Instruction::from_tokens(&tokens)?;
        if instruction.task != task || instruction.code != code {
            return Err(parse_err("tokens do not decode to the stated task/code"));
        }
        let target = [num(fields[5])?, num(fields[6])?];
        out.push(EditInstance {
            source,
            instruction,
            target,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn move_to_mode_keeps_offset_from_source_mode() {
        let inst = Instruction::new(Task::MoveToMode, 0).unwrap();
        let src = [-2.1, -1.8];
        let t = transform(&inst, src);
        assert!((t[0] - 1.9).abs() < 1e-12 && (t[1] - 2.2).abs() < 1e-12);
        // (0.1, -0.3) sits nearest the (2, -2) mode; its arrangement moves with it.
        let t = transform(&inst, [0.1, -0.3]);
        assert!((t[0] - 0.1).abs() < 1e-12 && (t[1] - 3.7).abs() < 1e-12);
    }

    #[test]
    fn reflect_about_x_axis() {
        let inst = Instruction::new(Task::ReflectAxis, 0).unwrap();
        assert_eq!(transform(&inst, [1.0, 2.0]), [1.0, -2.0]);
    }

    #[test]
    fn codes_decode_from_tokens() {
        for task in Task::ALL {
            for code in 0..task.num_codes() {
                let inst = Instruction::new(task, code).unwrap();
                assert!(!inst.tokens.is_empty() && inst.tokens.len() <= MAX_TOKENS);
                assert_eq!(Instruction::from_tokens(&inst.tokens).unwrap(), inst);
            }
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = synth_dataset("move-to-mode", 50, 11).unwrap();
        let b = synth_dataset("move-to-mode", 50, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_dataset("move-to-mode", 50, 12).unwrap());
    }

    #[test]
    fn unknown_task_rejected() {
        assert!(matches!(
            synth_dataset("rotate", 3, 0),
            Err(DataError::UnknownTask(_))
        ));
    }

    #[test]
    fn dataset_text_round_trip() {
        let mut data = synth_dataset("translate-offset", 20, 3).unwrap();
        data.extend(synth_dataset("reflect-axis", 20, 4).unwrap());
        let mut buf = Vec::new();
        write_dataset(&data, &mut buf).unwrap();
        let back = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(data, back);
    }

    #[test]
    fn malformed_dataset_line_reports_line_number() {
        let text = format!("{DATASET_HEADER}\n1.0 2.0 move-to-mode 0 0,1\n");
        match read_dataset(text.as_bytes()) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}

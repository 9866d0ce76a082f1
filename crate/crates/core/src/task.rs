use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// Auxiliary modality of an RGB+X task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    /// Natural-language description.
    Language,
    /// First-frame target mask.
    Mask,
    Depth,
    Thermal,
    Event,
}

impl Modality {
    pub const ALL: [Modality; 5] =
        [Modality::Language, Modality::Mask, Modality::Depth, Modality::Thermal, Modality::Event];

    pub fn letter(self) -> char {
        match self {
            Modality::Language => 'N',
            Modality::Mask => 'M',
            Modality::Depth => 'D',
            Modality::Thermal => 'T',
            Modality::Event => 'E',
        }
    }

    /// Depth, thermal and event maps share one embedding path.
    pub fn is_map(self) -> bool {
        matches!(self, Modality::Depth | Modality::Thermal | Modality::Event)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Rgb,
    RgbX(Modality),
}

impl Task {
    pub fn modality(self) -> Option<Modality> {
        match self {
            Task::Rgb => None,
            Task::RgbX(m) => Some(m),
        }
    }

    pub fn is_mask(self) -> bool {
        self == Task::RgbX(Modality::Mask)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Task::Rgb => "rgb",
            Task::RgbX(Modality::Language) => "rgb_n",
            Task::RgbX(Modality::Mask) => "rgb_m",
            Task::RgbX(Modality::Depth) => "rgb_d",
            Task::RgbX(Modality::Thermal) => "rgb_t",
            Task::RgbX(Modality::Event) => "rgb_e",
        };
        f.write_str(s)
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Ok(match s {
            "rgb" => Task::Rgb,
            "rgb_n" => Task::RgbX(Modality::Language),
            "rgb_m" => Task::RgbX(Modality::Mask),
            "rgb_d" => Task::RgbX(Modality::Depth),
            "rgb_t" => Task::RgbX(Modality::Thermal),
            "rgb_e" => Task::RgbX(Modality::Event),
            other => {
                return Err(Error::Config(format!(
                    "task: unknown task `{other}` (expected rgb, rgb_n, rgb_m, rgb_d, rgb_t or rgb_e)"
                )))
            }
        })
    }
}

//! Expression label space: 7 basic expressions plus an Invalid marker (-1).

use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{FerError, Result};

pub const NUM_CLASSES: usize = 7;

/// One of the seven basic expressions, or Invalid (annotation value -1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExpressionLabel {
    Neutral,
    Anger,
    Disgust,
    Fear,
    Happiness,
    Sadness,
    Surprise,
    Invalid,
}

impl ExpressionLabel {
    pub const ALL: [ExpressionLabel; 8] = [
        ExpressionLabel::Neutral,
        ExpressionLabel::Anger,
        ExpressionLabel::Disgust,
        ExpressionLabel::Fear,
        ExpressionLabel::Happiness,
        ExpressionLabel::Sadness,
        ExpressionLabel::Surprise,
        ExpressionLabel::Invalid,
    ];

    /// Decode an annotation code. Codes 0..=6 are the classes, -1 is Invalid.
    pub fn from_code(code: i64) -> Result<Self> {
        match code {
            -1 => Ok(ExpressionLabel::Invalid),
            0 => Ok(ExpressionLabel::Neutral),
            1 => Ok(ExpressionLabel::Anger),
            2 => Ok(ExpressionLabel::Disgust),
            3 => Ok(ExpressionLabel::Fear),
            4 => Ok(ExpressionLabel::Happiness),
            5 => Ok(ExpressionLabel::Sadness),
            6 => Ok(ExpressionLabel::Surprise),
            other => Err(FerError::InvalidInput(format!(
                "label code {other} out of range (expected -1 or 0..=6)"
            ))),
        }
    }

    pub fn code(self) -> i64 {
        match self {
            ExpressionLabel::Neutral => 0,
            ExpressionLabel::Anger => 1,
            ExpressionLabel::Disgust => 2,
            ExpressionLabel::Fear => 3,
            ExpressionLabel::Happiness => 4,
            ExpressionLabel::Sadness => 5,
            ExpressionLabel::Surprise => 6,
            ExpressionLabel::Invalid => -1,
        }
    }

    /// Class index for valid labels; Invalid has no index.
    pub fn class_index(self) -> Option<usize> {
        match self {
            ExpressionLabel::Invalid => None,
            other => Some(other.code() as usize),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ExpressionLabel::Neutral => "Neutral",
            ExpressionLabel::Anger => "Anger",
            ExpressionLabel::Disgust => "Disgust",
            ExpressionLabel::Fear => "Fear",
            ExpressionLabel::Happiness => "Happiness",
            ExpressionLabel::Sadness => "Sadness",
            ExpressionLabel::Surprise => "Surprise",
            ExpressionLabel::Invalid => "Invalid",
        }
    }

    pub fn is_valid(self) -> bool {
        self != ExpressionLabel::Invalid
    }
}

impl fmt::Display for ExpressionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Code-to-name mapping, overridable from a label-map file.
///
/// File format: one `code,name` pair per line, no extra whitespace, optional
/// trailing newline. Must cover codes 0..=6 exactly once each; `-1,Invalid`
/// is implied and may be listed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    names: [String; NUM_CLASSES],
}

impl Default for LabelMap {
    fn default() -> Self {
        LabelMap {
            names: [
                "Neutral".into(),
                "Anger".into(),
                "Disgust".into(),
                "Fear".into(),
                "Happiness".into(),
                "Sadness".into(),
                "Surprise".into(),
            ],
        }
    }
}

impl LabelMap {
    pub fn name(&self, class_index: usize) -> &str {
        &self.names[class_index]
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FerError::io(path, e))?;
        let mut names: [Option<String>; NUM_CLASSES] = Default::default();
        for (lineno, line) in text.lines().enumerate() {
            let mut parts = line.splitn(2, ',');
            let code_str = parts.next().unwrap_or("");
            let name = parts.next().ok_or_else(|| FerError::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: format!("expected `code,name`, got {line:?}"),
            })?;
            let code: i64 = code_str.parse().map_err(|_| FerError::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: format!("bad code {code_str:?}"),
            })?;
            if code == -1 {
                continue;
            }
            if !(0..NUM_CLASSES as i64).contains(&code) {
                return Err(FerError::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    msg: format!("code {code} out of range"),
                });
            }
            if names[code as usize].is_some() {
                return Err(FerError::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    msg: format!("duplicate code {code}"),
                });
            }
            names[code as usize] = Some(name.to_string());
        }
        let mut out = LabelMap::default();
        for (i, slot) in names.into_iter().enumerate() {
            match slot {
                Some(n) => out.names[i] = n,
                None => {
                    return Err(FerError::Parse {
                        path: path.to_path_buf(),
                        line: 0,
                        msg: format!("missing code {i}"),
                    })
                }
            }
        }
        Ok(out)
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for (i, n) in self.names.iter().enumerate() {
            s.push_str(&format!("{i},{n}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn code_roundtrip_all_eight() {
        for label in ExpressionLabel::ALL {
            assert_eq!(ExpressionLabel::from_code(label.code()).unwrap(), label);
        }
    }

    #[test]
    fn contract_cases() {
        assert_eq!(
            ExpressionLabel::from_code(0).unwrap(),
            ExpressionLabel::Neutral
        );
        assert_eq!(
            ExpressionLabel::from_code(-1).unwrap(),
            ExpressionLabel::Invalid
        );
        assert!(ExpressionLabel::from_code(7).is_err());
        assert!(ExpressionLabel::from_code(-2).is_err());
    }

    #[test]
    fn index_bijection_over_valid_codes() {
        let mut seen = [false; NUM_CLASSES];
        for code in 0..7 {
            let idx = ExpressionLabel::from_code(code)
                .unwrap()
                .class_index()
                .unwrap();
            assert!(!seen[idx]);
            seen[idx] = true;
        }
        assert!(seen.iter().all(|&s| s));
        assert_eq!(ExpressionLabel::Invalid.class_index(), None);
    }

    #[test]
    fn label_map_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.map");
        std::fs::write(&path, LabelMap::default().to_file_string()).unwrap();
        let loaded = LabelMap::load(&path).unwrap();
        assert_eq!(loaded, LabelMap::default());
    }

    #[test]
    fn label_map_rejects_duplicates_and_gaps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.map");
        std::fs::write(&path, "0,A\n0,B\n").unwrap();
        assert!(LabelMap::load(&path).is_err());
        std::fs::write(&path, "0,A\n1,B\n").unwrap();
        assert!(LabelMap::load(&path).is_err());
    }
}

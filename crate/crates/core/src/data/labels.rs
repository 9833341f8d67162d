use std::fmt;

use serde::{Deserialize, Serialize};

use super::DataError;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StyleLabel(String);

impl StyleLabel {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for StyleLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for StyleLabel {
    fn from(s: &str) -> Self {
        Self::new(s)
    }
}

/// The configured style labels, plus an optional factual label that a
/// classifier may be trained against but that no stylized sample carries.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    styles: Vec<StyleLabel>,
    factual: Option<StyleLabel>,
}

impl LabelSet {
    pub fn new(styles: Vec<StyleLabel>, factual: Option<StyleLabel>) -> Result<Self, DataError> {
        if styles.is_empty() {
            return Err(DataError::InvalidLabelSet("no style labels".into()));
        }
        for (i, label) in styles.iter().enumerate() {
            if label.as_str().trim().is_empty() {
                return Err(DataError::InvalidLabelSet("blank label".into()));
            }
            if styles[..i].contains(label) {
                return Err(DataError::InvalidLabelSet(format!("duplicate label '{label}'")));
            }
        }
        if let Some(f) = &factual {
            if styles.contains(f) {
                return Err(DataError::InvalidLabelSet(format!(
                    "factual label '{f}' is also listed as a style"
                )));
            }
        }
        Ok(Self { styles, factual })
    }

    /// Parses a comma separated list such as `humor,roman,pos,neg`.
    pub fn parse(styles: &str, factual: Option<&str>) -> Result<Self, DataError> {
        let styles = styles
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(StyleLabel::new)
            .collect();
        Self::new(styles, factual.map(StyleLabel::new))
    }

    pub fn styles(&self) -> &[StyleLabel] {
        &self.styles
    }

    pub fn factual(&self) -> Option<&StyleLabel> {
        self.factual.as_ref()
    }

    /// Styles first, then the factual label if any.
    pub fn all(&self) -> impl Iterator<Item = &StyleLabel> {
        self.styles.iter().chain(self.factual.iter())
    }

    pub fn len(&self) -> usize {
        self.styles.len() + usize::from(self.factual.is_some())
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, label: &StyleLabel) -> bool {
        self.all().any(|l| l == label)
    }

    pub fn is_style(&self, label: &StyleLabel) -> bool {
        self.styles.contains(label)
    }

    /// Checks that `label` may tag a stylized sample.
    pub fn check_style(&self, label: &StyleLabel) -> Result<(), DataError> {
        if self.is_style(label) {
            Ok(())
        } else if self.factual.as_ref() == Some(label) {
            Err(DataError::FactualStyle(label.to_string()))
        } else {
            Err(DataError::UnknownLabel(label.to_string()))
        }
    }

    /// Same labels irrespective of order.
    pub fn same_members<'a>(&self, other: impl IntoIterator<Item = &'a StyleLabel>) -> bool {
        let mut mine: Vec<&StyleLabel> = self.all().collect();
        let mut theirs: Vec<&StyleLabel> = other.into_iter().collect();
        mine.sort();
        theirs.sort();
        mine == theirs
    }
}

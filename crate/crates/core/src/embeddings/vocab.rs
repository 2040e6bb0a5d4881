use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::IGNORE;

/// Label value of a class in label maps; 0 is background.
pub type ClassId = u8;

pub const BACKGROUND: ClassId = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Base,
    Novel,
    /// Novel classes of an incremental session (1-based).
    Session(u32),
}

impl Split {
    pub fn is_novel(self) -> bool {
        !matches!(self, Split::Base)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub class_id: ClassId,
    pub name: String,
    pub split: Split,
}

impl ClassEntry {
    pub fn new(class_id: ClassId, name: impl Into<String>, split: Split) -> Self {
        Self {
            class_id,
            name: name.into(),
            split,
        }
    }
}

/// Ordered class list; row `i` of every prototype matrix belongs to entry `i`
/// and to logit channel `i + 1` (channel 0 is background).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassVocabulary {
    entries: Vec<ClassEntry>,
}

impl ClassVocabulary {
    pub fn new(entries: Vec<ClassEntry>) -> Result<Self> {
        let mut v = Self::default();
        for e in entries {
            v.push(e)?;
        }
        Ok(v)
    }

    pub fn push(&mut self, e: ClassEntry) -> Result<()> {
        if e.class_id == BACKGROUND || e.class_id == IGNORE {
            return Err(Error::Registration(format!(
                "class id {} is reserved",
                e.class_id
            )));
        }
        if e.name.trim().is_empty() {
            return Err(Error::Registration("class names must be nonempty".into()));
        }
        if self.entries.iter().any(|x| x.class_id == e.class_id) {
            return Err(Error::Registration(format!(
                "class id {} already registered",
                e.class_id
            )));
        }
        if self.entries.iter().any(|x| x.name == e.name) {
            return Err(Error::Registration(format!(
                "class `{}` already registered",
                e.name
            )));
        }
        self.entries.push(e);
        Ok(())
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of logit channels, background included.
    pub fn channels(&self) -> usize {
        self.entries.len() + 1
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name.as_str()).collect()
    }

    pub fn ids(&self) -> Vec<ClassId> {
        self.entries.iter().map(|e| e.class_id).collect()
    }

    pub fn contains(&self, id: ClassId) -> bool {
        self.entries.iter().any(|e| e.class_id == id)
    }

    pub fn get(&self, id: ClassId) -> Option<&ClassEntry> {
        self.entries.iter().find(|e| e.class_id == id)
    }

    pub fn channel_of(&self, id: ClassId) -> Option<usize> {
        if id == BACKGROUND {
            return Some(0);
        }
        self.entries.iter().position(|e| e.class_id == id).map(|i| i + 1)
    }

    pub fn class_of_channel(&self, channel: usize) -> ClassId {
        if channel == 0 {
            BACKGROUND
        } else {
            self.entries[channel - 1].class_id
        }
    }

    pub fn with_split(&self, pred: impl Fn(Split) -> bool) -> Vec<ClassId> {
        self.entries
            .iter()
            .filter(|e| pred(e.split))
            .map(|e| e.class_id)
            .collect()
    }

    /// Lookup table from label value to channel; unknown labels map to
    /// [`IGNORE`].
    pub fn channel_table(&self) -> [u8; 256] {
        let mut t = [IGNORE; 256];
        t[BACKGROUND as usize] = 0;
        for (i, e) in self.entries.iter().enumerate() {
            t[e.class_id as usize] = (i + 1) as u8;
        }
        t
    }

    /// Label values mapped to channels; unknown labels become [`IGNORE`].
    pub fn to_channels(&self, labels: &[u8]) -> Vec<u8> {
        let t = self.channel_table();
        labels.iter().map(|&l| t[l as usize]).collect()
    }
}

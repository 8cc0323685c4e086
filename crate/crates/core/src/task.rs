use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// The four supervised tasks sharing one backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Seg,
    Cls,
    Det,
    Reg,
}

impl Task {
    /// Round-robin order used by the multi-task schedule.
    pub const ALL: [Task; 4] = [Task::Seg, Task::Cls, Task::Det, Task::Reg];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Seg => "seg",
            Task::Cls => "cls",
            Task::Det => "det",
            Task::Reg => "reg",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Task::Seg => 0,
            Task::Cls => 1,
            Task::Det => 2,
            Task::Reg => 3,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "seg" => Ok(Task::Seg),
            "cls" => Ok(Task::Cls),
            "det" => Ok(Task::Det),
            "reg" => Ok(Task::Reg),
            other => Err(Error::Routing(format!("unknown task {other:?}"))),
        }
    }
}

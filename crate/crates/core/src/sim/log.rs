use std::fmt;
use std::str::FromStr;

use crate::domain::DeviceId;

use super::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TaskKind {
    FwCompute,
    BwCompute,
    FwTransfer,
    BwTransfer,
    HeadHandoffTransfer,
    HeadUpdateCompute,
}

impl TaskKind {
    pub fn is_compute(self) -> bool {
        matches!(
            self,
            TaskKind::FwCompute | TaskKind::BwCompute | TaskKind::HeadUpdateCompute
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::FwCompute => "fw_compute",
            TaskKind::BwCompute => "bw_compute",
            TaskKind::FwTransfer => "fw_transfer",
            TaskKind::BwTransfer => "bw_transfer",
            TaskKind::HeadHandoffTransfer => "head_handoff",
            TaskKind::HeadUpdateCompute => "head_update",
        }
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "fw_compute" => TaskKind::FwCompute,
            "bw_compute" => TaskKind::BwCompute,
            "fw_transfer" => TaskKind::FwTransfer,
            "bw_transfer" => TaskKind::BwTransfer,
            "head_handoff" => TaskKind::HeadHandoffTransfer,
            "head_update" => TaskKind::HeadUpdateCompute,
            other => return Err(format!("unknown task kind `{other}`")),
        })
    }
}

/// Where a task runs: a device's compute unit or a directed link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Place {
    Device(DeviceId),
    Link { src: DeviceId, dst: DeviceId },
}

impl Place {
    /// The device a compute runs on, or the sender of a transfer.
    pub fn device(self) -> DeviceId {
        match self {
            Place::Device(d) => d,
            Place::Link { src, .. } => src,
        }
    }
}

impl fmt::Display for Place {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Place::Device(d) => write!(f, "{d}"),
            Place::Link { src, dst } => write!(f, "{src}->{dst}"),
        }
    }
}

impl FromStr for Place {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        fn id(s: &str) -> Result<DeviceId, String> {
            s.strip_prefix('u')
                .and_then(|n| n.parse().ok())
                .map(DeviceId)
                .ok_or_else(|| format!("bad device `{s}`"))
        }
        match s.split_once("->") {
            Some((a, b)) => Ok(Place::Link {
                src: id(a)?,
                dst: id(b)?,
            }),
            None => Ok(Place::Device(id(s)?)),
        }
    }
}

/// One unit of simulated work.
///
/// Layer indices follow the domain convention: `0` is the embedding and
/// `L + 1` the head. Transfers name the layer whose output (or output
/// gradient) they carry in both fields.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Task {
    pub kind: TaskKind,
    pub place: Place,
    pub batch: u64,
    pub layer_begin: usize,
    pub layer_end: usize,
    pub duration: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub start: f64,
    pub end: f64,
    pub task: Task,
}

impl Event {
    fn order_key(&self) -> (f64, Place, u64, TaskKind) {
        (self.start, self.task.place, self.task.batch, self.task.kind)
    }
}

/// Timed tasks ordered by start time, ties broken by place, batch and kind.
#[derive(Debug, Clone, PartialEq)]
pub struct EventLog {
    pub events: Vec<Event>,
    /// In-flight bound per gated device the schedule was built with.
    pub window: usize,
}

impl EventLog {
    pub fn new(mut events: Vec<Event>, window: usize) -> Self {
        events.sort_by(|a, b| {
            let (ka, kb) = (a.order_key(), b.order_key());
            ka.0.total_cmp(&kb.0)
                .then_with(|| (ka.1, ka.2, ka.3).cmp(&(kb.1, kb.2, kb.3)))
        });
        Self { events, window }
    }

    /// Latest end time, zero for an empty log.
    pub fn makespan(&self) -> f64 {
        self.events.iter().map(|e| e.end).fold(0.0, f64::max)
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Shift every timestamp by `dt` and every batch id by `db`.
    pub fn shifted(&self, dt: f64, db: u64) -> Self {
        let events = self
            .events
            .iter()
            .map(|e| {
                let mut task = e.task;
                task.batch += db;
                Event {
                    start: e.start + dt,
                    end: e.end + dt,
                    task,
                }
            })
            .collect();
        Self {
            events,
            window: self.window,
        }
    }

    /// Time at which every task of `batch` has finished.
    pub fn batch_completion(&self, batch: u64) -> Option<f64> {
        self.events
            .iter()
            .filter(|e| e.task.batch == batch)
            .map(|e| e.end)
            .reduce(f64::max)
    }

    /// Devices visited by forward computes of `batch`, in time order
    /// (embedding, blocks, head).
    pub fn forward_path(&self, batch: u64) -> Vec<DeviceId> {
        self.path(batch, |k| k == TaskKind::FwCompute)
    }

    /// Devices visited from the head update down to the last backward compute.
    pub fn backward_path(&self, batch: u64) -> Vec<DeviceId> {
        self.path(batch, |k| {
            matches!(k, TaskKind::BwCompute | TaskKind::HeadUpdateCompute)
        })
    }

    fn path(&self, batch: u64, keep: impl Fn(TaskKind) -> bool) -> Vec<DeviceId> {
        let mut out: Vec<DeviceId> = Vec::new();
        for e in self
            .events
            .iter()
            .filter(|e| e.task.batch == batch && keep(e.task.kind))
        {
            let d = e.task.place.device();
            if out.last() != Some(&d) {
                out.push(d);
            }
        }
        out
    }

    /// Line-oriented export: `start end kind device batch layer_begin layer_end`.
    ///
    /// Times use Rust's shortest round-trip float formatting, so
    /// [`EventLog::parse`] reproduces the log exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# start end kind device batch layer_begin layer_end\n");
        out.push_str(&format!("# window {}\n", self.window));
        for e in &self.events {
            let t = &e.task;
            out.push_str(&format!(
                "{} {} {} {} {} {} {}\n",
                e.start,
                e.end,
                t.kind.name(),
                t.place,
                t.batch,
                t.layer_begin,
                t.layer_end
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, SimError> {
        let mut window = 1;
        let mut events = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let err = |reason: String| SimError::Parse {
                line: i + 1,
                reason,
            };
            let line = line.trim();
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(w) = comment.trim().strip_prefix("window ") {
                    window = w
                        .trim()
                        .parse()
                        .map_err(|_| err(format!("bad window `{w}`")))?;
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() != 7 {
                return Err(err(format!("expected 7 columns, found {}", cols.len())));
            }
            let float = |s: &str| s.parse::<f64>().map_err(|_| err(format!("bad time `{s}`")));
            let int = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| err(format!("bad integer `{s}`")))
            };
            let start = float(cols[0])?;
            let end = float(cols[1])?;
            let task = Task {
                kind: cols[2].parse().map_err(err)?,
                place: cols[3].parse().map_err(err)?,
                batch: cols[4]
                    .parse()
                    .map_err(|_| err(format!("bad batch `{}`", cols[4])))?,
                layer_begin: int(cols[5])?,
                layer_end: int(cols[6])?,
                duration: end - start,
            };
            events.push(Event { start, end, task });
        }
        Ok(Self::new(events, window))
    }
}

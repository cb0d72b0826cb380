//! Coordinator/worker protocol: frames are a 4-byte big-endian length
//! followed by a UTF-8 JSON payload. Floats are written with 17 significant
//! digits so every value survives the round trip bit for bit.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Mutex;

use nalgebra::DMatrix;
use serde::de::Deserializer;
use serde::ser::{Error as _, Serializer};
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::dnc::{fit_subsample, round2_local, Executor, SubsampleSummary, Task, VarianceSpec};
use crate::error::{Error, Result};
use crate::inference::BandwidthRule;
use crate::projection::QuantileGrid;
use crate::qr::DesignBlock;

/// Frames above this size are rejected as malformed.
const MAX_FRAME: u32 = 1 << 30;

/// A float serialized as `{:.16e}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Num(pub f64);

impl Serialize for Num {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        if !self.0.is_finite() {
            return Err(S::Error::custom(format!("cannot encode non-finite value {}", self.0)));
        }
        let raw = RawValue::from_string(format!("{:.16e}", self.0)).map_err(S::Error::custom)?;
        raw.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Num {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        f64::deserialize(deserializer).map(Num)
    }
}

pub type Mat = Vec<Vec<Num>>;

pub fn encode_matrix(m: &DMatrix<f64>) -> Mat {
    m.row_iter().map(|r| r.iter().map(|&v| Num(v)).collect()).collect()
}

pub fn decode_matrix(rows: &Mat) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Protocol("ragged matrix".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |r, c| rows[r][c].0))
}

fn encode_vec(v: &[f64]) -> Vec<Num> {
    v.iter().map(|&x| Num(x)).collect()
}

fn decode_vec(v: &[Num]) -> Vec<f64> {
    v.iter().map(|x| x.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceWire {
    /// `naive`, `adjusted` or `fixed`.
    pub rule: String,
    /// Bandwidth constant per grid point; a single entry holds `h` for the fixed rule.
    pub constant: Vec<Num>,
    pub total_n: usize,
}

impl VarianceWire {
    pub fn encode(spec: &VarianceSpec) -> Self {
        let (rule, constant) = match spec.rule {
            BandwidthRule::Naive => ("naive", encode_vec(&spec.constants)),
            BandwidthRule::Adjusted => ("adjusted", encode_vec(&spec.constants)),
            BandwidthRule::Fixed(h) => ("fixed", vec![Num(h)]),
        };
        Self {
            rule: rule.into(),
            constant,
            total_n: spec.total_n,
        }
    }

    pub fn decode(&self) -> Result<VarianceSpec> {
        let constants = decode_vec(&self.constant);
        let rule = match self.rule.as_str() {
            "naive" => BandwidthRule::Naive,
            "adjusted" => BandwidthRule::Adjusted,
            "fixed" => BandwidthRule::Fixed(
                *constants
                    .first()
                    .ok_or_else(|| Error::Protocol("fixed bandwidth without a value".into()))?,
            ),
            other => return Err(Error::Protocol(format!("unknown bandwidth rule {other:?}"))),
        };
        Ok(VarianceSpec {
            rule,
            constants: if matches!(rule, BandwidthRule::Fixed(_)) { vec![] } else { constants },
            total_n: self.total_n,
        })
    }
}

/// Sub-sample data shipped with a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockWire {
    pub rows: Mat,
    pub y: Vec<Num>,
}

impl BlockWire {
    pub fn encode(block: &DesignBlock) -> Self {
        Self {
            rows: (0..block.n()).map(|i| encode_vec(block.row(i))).collect(),
            y: encode_vec(block.responses()),
        }
    }

    pub fn decode(&self) -> Result<DesignBlock> {
        let rows: Vec<Vec<f64>> = self.rows.iter().map(|r| decode_vec(r)).collect();
        DesignBlock::from_rows(&rows, decode_vec(&self.y))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Task {
        s: usize,
        grid: Vec<Num>,
        variance: Option<VarianceWire>,
        block: BlockWire,
    },
    Summary {
        s: usize,
        n: usize,
        betas: Mat,
        j_powell: Option<Vec<Mat>>,
        gram: Option<Mat>,
    },
    BroadcastBeta {
        s: usize,
        betas: Mat,
        bandwidths: Vec<Num>,
    },
    Summary2 {
        s: usize,
        j_tilde: Vec<Mat>,
    },
    Error {
        message: String,
    },
    Shutdown,
}

impl Message {
    pub fn task(task: &Task) -> Self {
        Message::Task {
            s: task.s,
            grid: encode_vec(task.grid.points()),
            variance: task.variance.as_ref().map(VarianceWire::encode),
            block: BlockWire::encode(&task.block),
        }
    }

    pub fn summary(sum: &SubsampleSummary) -> Self {
        Message::Summary {
            s: sum.s,
            n: sum.n,
            betas: encode_matrix(&sum.betas),
            j_powell: sum.j_powell.as_ref().map(|l| l.iter().map(encode_matrix).collect()),
            gram: sum.gram.as_ref().map(encode_matrix),
        }
    }

    /// Rebuilds a summary; the grid is not on the wire and is supplied by the caller.
    pub fn into_summary(self, grid: &QuantileGrid) -> Result<SubsampleSummary> {
        match self {
            Message::Summary {
                s,
                n,
                betas,
                j_powell,
                gram,
            } => Ok(SubsampleSummary {
                s,
                n,
                grid: grid.clone(),
                betas: decode_matrix(&betas)?,
                j_powell: j_powell
                    .map(|l| l.iter().map(decode_matrix).collect::<Result<Vec<_>>>())
                    .transpose()?,
                gram: gram.as_ref().map(decode_matrix).transpose()?,
            }),
            Message::Error { message } => Err(Error::Protocol(format!("worker failed: {message}"))),
            other => Err(Error::Protocol(format!("expected a summary, got {other:?}"))),
        }
    }
}

pub fn write_frame<W: Write>(w: &mut W, msg: &Message) -> Result<()> {
    let payload = serde_json::to_vec(msg)?;
    let len = u32::try_from(payload.len())
        .ok()
        .filter(|&l| l <= MAX_FRAME)
        .ok_or_else(|| Error::Protocol(format!("frame of {} bytes is too large", payload.len())))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame; `Ok(None)` on a clean end of stream before the length prefix.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Message>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len);
    if len > MAX_FRAME {
        return Err(Error::Protocol(format!("frame length {len} exceeds the limit")));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    let text = std::str::from_utf8(&payload).map_err(|e| Error::Protocol(format!("payload is not UTF-8: {e}")))?;
    Ok(Some(serde_json::from_str(text)?))
}

/// Handles one worker request; blocks are cached by `s` for the second round.
fn handle(msg: Message, cache: &mut HashMap<usize, DesignBlock>) -> Result<Option<Message>> {
    match msg {
        Message::Task {
            s,
            grid,
            variance,
            block,
        } => {
            let grid = QuantileGrid::from_points(decode_vec(&grid))?;
            let variance = variance.as_ref().map(VarianceWire::decode).transpose()?;
            let block = block.decode()?;
            let summary = fit_subsample(s, &block, &grid, variance.as_ref())?;
            cache.insert(s, block);
            Ok(Some(Message::summary(&summary)))
        }
        Message::BroadcastBeta { s, betas, bandwidths } => {
            let block = cache
                .get(&s)
                .ok_or_else(|| Error::Protocol(format!("no cached data for sub-sample {s}")))?;
            let j = round2_local(block, &decode_matrix(&betas)?, &decode_vec(&bandwidths))?;
            Ok(Some(Message::Summary2 {
                s,
                j_tilde: j.iter().map(encode_matrix).collect(),
            }))
        }
        Message::Shutdown => Ok(None),
        other => Err(Error::Protocol(format!("unexpected message for a worker: {other:?}"))),
    }
}

/// Serves one coordinator connection until it closes or sends `shutdown`.
/// Returns `true` when a shutdown was requested.
pub fn serve_connection(stream: TcpStream) -> Result<bool> {
    let mut reader = stream.try_clone()?;
    let mut writer = stream;
    let mut cache = HashMap::new();
    while let Some(msg) = read_frame(&mut reader)? {
        match handle(msg, &mut cache) {
            Ok(Some(reply)) => write_frame(&mut writer, &reply)?,
            Ok(None) => return Ok(true),
            Err(e) => write_frame(
                &mut writer,
                &Message::Error {
                    message: e.to_string(),
                },
            )?,
        }
    }
    Ok(false)
}

/// Accepts coordinator connections one at a time until a shutdown message arrives
/// (or after the first connection when `once` is set).
pub fn serve(listener: TcpListener, once: bool) -> Result<()> {
    for stream in listener.incoming() {
        let stop = serve_connection(stream?)?;
        if stop || once {
            break;
        }
    }
    Ok(())
}

/// Executor that ships tasks to remote workers; task `i` goes to worker `i mod W`.
pub struct Remote {
    workers: Vec<Mutex<TcpStream>>,
}

impl Remote {
    pub fn connect<A: ToSocketAddrs>(addrs: &[A]) -> Result<Self> {
        if addrs.is_empty() {
            return Err(Error::Config("no worker endpoints given".into()));
        }
        let workers = addrs
            .iter()
            .map(|a| {
                let s = TcpStream::connect(a)?;
                s.set_nodelay(true)?;
                Ok(Mutex::new(s))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { workers })
    }

    /// Asks every worker to stop serving.
    pub fn shutdown(self) -> Result<()> {
        for w in self.workers {
            let mut stream = w.into_inner().map_err(|_| Error::Protocol("worker lock poisoned".into()))?;
            write_frame(&mut stream, &Message::Shutdown)?;
        }
        Ok(())
    }

    /// Sends each worker its share of requests in order and collects the replies.
    fn exchange(&self, requests: Vec<Message>) -> Result<Vec<Message>> {
        let w = self.workers.len();
        let mut per_worker: Vec<Vec<(usize, Message)>> = (0..w).map(|_| Vec::new()).collect();
        let total = requests.len();
        for (i, msg) in requests.into_iter().enumerate() {
            per_worker[i % w].push((i, msg));
        }
        let results: Vec<Result<Vec<(usize, Message)>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = per_worker
                .into_iter()
                .zip(&self.workers)
                .map(|(batch, conn)| {
                    scope.spawn(move || -> Result<Vec<(usize, Message)>> {
                        let mut stream = conn.lock().map_err(|_| Error::Protocol("worker lock poisoned".into()))?;
                        for (_, msg) in &batch {
                            write_frame(&mut *stream, msg)?;
                        }
                        let mut out = Vec::with_capacity(batch.len());
                        for (i, _) in &batch {
                            let reply = read_frame(&mut *stream)?
                                .ok_or_else(|| Error::Protocol("worker closed the connection".into()))?;
                            out.push((*i, reply));
                        }
                        Ok(out)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Protocol("worker thread panicked".into()))))
                .collect()
        });
        let mut slots: Vec<Option<Message>> = (0..total).map(|_| None).collect();
        for r in results {
            for (i, msg) in r? {
                slots[i] = Some(msg);
            }
        }
        slots
            .into_iter()
            .map(|m| m.ok_or_else(|| Error::Protocol("missing reply".into())))
            .collect()
    }
}

impl Executor for Remote {
    fn run(&self, tasks: Vec<Task>) -> Result<Vec<SubsampleSummary>> {
        let replies = self.exchange(tasks.iter().map(Message::task).collect())?;
        let mut out = tasks
            .iter()
            .zip(replies)
            .map(|(t, reply)| {
                let sum = reply.into_summary(&t.grid)?;
                if sum.s != t.s {
                    return Err(Error::Protocol(format!("asked for sub-sample {}, got {}", t.s, sum.s)));
                }
                Ok(sum)
            })
            .collect::<Result<Vec<_>>>()?;
        out.sort_by_key(|x| x.s);
        Ok(out)
    }

    fn round2(&self, tasks: &[Task], beta_bar: &DMatrix<f64>, bandwidths: &[f64]) -> Result<Vec<Vec<DMatrix<f64>>>> {
        let requests = tasks
            .iter()
            .map(|t| Message::BroadcastBeta {
                s: t.s,
                betas: encode_matrix(beta_bar),
                bandwidths: encode_vec(bandwidths),
            })
            .collect();
        self.exchange(requests)?
            .into_iter()
            .zip(tasks)
            .map(|(reply, t)| match reply {
                Message::Summary2 { s, j_tilde } if s == t.s => j_tilde.iter().map(decode_matrix).collect(),
                Message::Error { message } => Err(Error::Protocol(format!("worker failed: {message}"))),
                other => Err(Error::Protocol(format!("expected summary2 for {}, got {other:?}", t.s))),
            })
            .collect()
    }

    fn reentrant(&self) -> bool {
        false
    }
}

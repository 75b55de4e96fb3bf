//! TNTP road networks and zone-to-zone free-flow travel times.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rayon::prelude::*;

use crate::error::{io_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Link {
    /// 1-based node ids, as in TNTP files.
    pub tail: usize,
    pub head: usize,
    pub time: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoadNetwork {
    pub n_nodes: usize,
    pub links: Vec<Link>,
    /// Zone node ids; TNTP zones are nodes `1..=n_zones`.
    pub zones: Vec<usize>,
    /// Zone nodes below this id are never used as intermediate nodes.
    pub first_thru_node: usize,
}

impl RoadNetwork {
    /// Same network with links sorted by (tail, head, time).
    pub fn canonical(&self) -> RoadNetwork {
        let mut out = self.clone();
        out.links.sort_by(|a, b| {
            (a.tail, a.head)
                .cmp(&(b.tail, b.head))
                .then(a.time.total_cmp(&b.time))
        });
        out
    }

    pub fn to_tntp(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "<NUMBER OF ZONES> {}", self.zones.len());
        let _ = writeln!(s, "<NUMBER OF NODES> {}", self.n_nodes);
        let _ = writeln!(s, "<FIRST THRU NODE> {}", self.first_thru_node);
        let _ = writeln!(s, "<NUMBER OF LINKS> {}", self.links.len());
        let _ = writeln!(s, "<END OF METADATA>\n");
        let _ = writeln!(s, "~\tinit_node\tterm_node\tcapacity\tlength\tfree_flow_time\tb\tpower\tspeed\ttoll\tlink_type\t;");
        for l in &self.links {
            let _ = writeln!(
                s,
                "\t{}\t{}\t0\t0\t{}\t0.15\t4\t0\t0\t1\t;",
                l.tail, l.head, l.time
            );
        }
        s
    }
}

fn meta(text: &str, tag: &str) -> Result<usize> {
    let line = text
        .lines()
        .find(|l| l.trim_start().starts_with(tag))
        .ok_or_else(|| Error::Parse(format!("missing header tag {tag}")))?;
    line.trim_start()[tag.len()..]
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("bad value for {tag}")))
}

pub fn parse_tntp(text: &str) -> Result<RoadNetwork> {
    let n_zones = meta(text, "<NUMBER OF ZONES>")?;
    let n_nodes = meta(text, "<NUMBER OF NODES>")?;
    let first_thru_node = meta(text, "<FIRST THRU NODE>").unwrap_or(1);
    let declared_links = meta(text, "<NUMBER OF LINKS>").ok();
    let end = text
        .find("<END OF METADATA>")
        .ok_or_else(|| Error::Parse("missing header tag <END OF METADATA>".into()))?;
    let header_lines = text[..end].lines().count();
    let mut links = Vec::new();
    for (i, raw) in text[end..].lines().enumerate().skip(1) {
        let lineno = header_lines + i + 1;
        let line = raw
            .split('~')
            .next()
            .unwrap_or("")
            .trim()
            .trim_end_matches(';')
            .trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() < 5 {
            return Err(Error::Parse(format!(
                "line {lineno}: expected at least 5 columns"
            )));
        }
        let num = |k: usize| -> Result<f64> {
            cols[k]
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("line {lineno}: bad number {:?}", cols[k])))
        };
        let (tail, head, time) = (num(0)?, num(1)?, num(4)?);
        for v in [tail, head] {
            if v < 1.0 || v > n_nodes as f64 || v.fract() != 0.0 {
                return Err(Error::Parse(format!(
                    "line {lineno}: node {v} out of range 1..={n_nodes}"
                )));
            }
        }
        if !(time >= 0.0) {
            return Err(Error::Parse(format!(
                "line {lineno}: negative free-flow time {time}"
            )));
        }
        links.push(Link {
            tail: tail as usize,
            head: head as usize,
            time,
        });
    }
    if let Some(n) = declared_links {
        if n != links.len() {
            log::warn!("header declares {n} links, found {}", links.len());
        }
    }
    if n_zones > n_nodes {
        return Err(Error::Parse(format!(
            "{n_zones} zones but only {n_nodes} nodes"
        )));
    }
    Ok(RoadNetwork {
        n_nodes,
        links,
        zones: (1..=n_zones).collect(),
        first_thru_node,
    })
}

pub fn read_tntp(path: &Path) -> Result<RoadNetwork> {
    parse_tntp(&std::fs::read_to_string(path).map_err(io_err(path))?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TravelMatrix {
    pub zones: Vec<u64>,
    pub t: Vec<Vec<f64>>,
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Single-source shortest times over 0-based adjacency lists.
fn dijkstra(adj: &[Vec<(usize, f64)>], src: usize, blocked: &dyn Fn(usize) -> bool) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; adj.len()];
    dist[src] = 0.0;
    let mut heap = BinaryHeap::from([Entry(0.0, src)]);
    while let Some(Entry(d, u)) = heap.pop() {
        if d > dist[u] || (u != src && blocked(u)) {
            continue;
        }
        for &(v, w) in &adj[u] {
            let nd = d + w;
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(Entry(nd, v));
            }
        }
    }
    dist
}

pub fn zone_travel_times(net: &RoadNetwork) -> Result<TravelMatrix> {
    let mut adj = vec![Vec::new(); net.n_nodes];
    for l in &net.links {
        adj[l.tail - 1].push((l.head - 1, l.time));
    }
    let n_zones = net.zones.len();
    let blocked = |u: usize| u + 1 < net.first_thru_node && u < n_zones;
    let rows: Vec<Vec<f64>> = net
        .zones
        .par_iter()
        .map(|&z| {
            let dist = dijkstra(&adj, z - 1, &blocked);
            net.zones.iter().map(|&y| dist[y - 1]).collect()
        })
        .collect();
    for (a, row) in rows.iter().enumerate() {
        if let Some(b) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::Unreachable {
                from: net.zones[a] as u64,
                to: net.zones[b] as u64,
            });
        }
    }
    Ok(TravelMatrix {
        zones: net.zones.iter().map(|&z| z as u64).collect(),
        t: rows,
    })
}

impl TravelMatrix {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("zone");
        for z in &self.zones {
            let _ = write!(s, ",{z}");
        }
        s.push('\n');
        for (z, row) in self.zones.iter().zip(&self.t) {
            let _ = write!(s, "{z}");
            for v in row {
                let _ = write!(s, ",{v:?}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<TravelMatrix> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let header = rdr.headers()?.clone();
        let parse_id = |s: &str| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| Error::Parse(format!("bad zone id {s:?}")))
        };
        let zones: Vec<u64> = header.iter().skip(1).map(parse_id).collect::<Result<_>>()?;
        let mut t = Vec::with_capacity(zones.len());
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != zones.len() + 1 || parse_id(&rec[0])? != zones[i] {
                return Err(Error::Parse(format!(
                    "matrix row {} does not match the header",
                    i + 1
                )));
            }
            let row = rec
                .iter()
                .skip(1)
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Parse(format!("bad time {s:?}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            t.push(row);
        }
        if t.len() != zones.len() {
            return Err(Error::Parse("matrix is not square".into()));
        }
        Ok(TravelMatrix { zones, t })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<TravelMatrix> {
        Self::from_csv(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }
}

/// Bidirectional `rows x cols` grid with symmetric link times drawn from
/// `[1, 4)` minutes; every node is a zone.
pub fn synthetic_grid(rows: usize, cols: usize, seed: u64) -> RoadNetwork {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let id = |r: usize, c: usize| r * cols + c + 1;
    let mut links = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let mut add = |a: usize, b: usize, rng: &mut rand_chacha::ChaCha8Rng| {
                let time = (rng.gen_range(1.0..4.0) * 100.0f64).round() / 100.0;
                links.push(Link {
                    tail: a,
                    head: b,
                    time,
                });
                links.push(Link {
                    tail: b,
                    head: a,
                    time,
                });
            };
            if c + 1 < cols {
                add(id(r, c), id(r, c + 1), &mut rng);
            }
            if r + 1 < rows {
                add(id(r, c), id(r + 1, c), &mut rng);
            }
        }
    }
    RoadNetwork {
        n_nodes: rows * cols,
        links,
        zones: (1..=rows * cols).collect(),
        first_thru_node: 1,
    }
}

/// Default desk network: 12 x 12 grid, 144 zones.
pub fn default_network() -> RoadNetwork {
    synthetic_grid(12, 12, 7)
}

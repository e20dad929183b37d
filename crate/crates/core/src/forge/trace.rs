//! Skeleton to polyline conversion.
//!
//! Pixels with three or more skeleton neighbours are junctions. Adjacent
//! junction pixels form a cluster represented by the pixel nearest the
//! cluster centroid; every branch leaving a cluster becomes one segment that
//! starts at that representative. Junction-free components become a single
//! open path or a closed loop.

use std::collections::VecDeque;

use crate::raster::Mask;

use super::{Point, VesselSegment};

const NEIGHBORS: [(isize, isize); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];

struct Tracer<'a> {
    skel: &'a Mask,
    w: usize,
    degree: Vec<u8>,
    /// Junction cluster id (1-based) per pixel, 0 for non-junctions.
    cluster: Vec<u32>,
    clusters: Vec<Vec<usize>>,
    reps: Vec<usize>,
    visited: Vec<bool>,
    segments: Vec<Vec<usize>>,
}

pub fn trace_polylines(skeleton: &Mask) -> Vec<VesselSegment> {
    let mut tracer = Tracer::new(skeleton);
    tracer.run();
    let w = tracer.w;
    tracer
        .segments
        .into_iter()
        .enumerate()
        .map(|(id, idx)| VesselSegment {
            id,
            points: idx
                .into_iter()
                .map(|i| Point {
                    x: (i % w) as i32,
                    y: (i / w) as i32,
                })
                .collect(),
            thickness: 0.0,
        })
        .collect()
}

impl<'a> Tracer<'a> {
    fn new(skel: &'a Mask) -> Self {
        let (w, h) = skel.dims();
        let mut degree = vec![0u8; w * h];
        for (x, y) in skel.iter_on() {
            degree[y * w + x] = NEIGHBORS
                .iter()
                .filter(|(dx, dy)| skel.get_signed(x as isize + dx, y as isize + dy))
                .count() as u8;
        }
        let mut t = Self {
            skel,
            w,
            degree,
            cluster: vec![0; w * h],
            clusters: Vec::new(),
            reps: Vec::new(),
            visited: vec![false; w * h],
            segments: Vec::new(),
        };
        t.build_clusters();
        // Junction pixels are reached through their clusters only; the
        // open-path and loop passes must not start from them.
        for members in &t.clusters {
            for &m in members {
                t.visited[m] = true;
            }
        }
        t
    }

    fn on(&self, i: usize) -> bool {
        self.skel.data()[i] != 0
    }

    fn is_junction(&self, i: usize) -> bool {
        self.on(i) && self.degree[i] >= 3
    }

    fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let (x, y) = ((i % self.w) as isize, (i / self.w) as isize);
        NEIGHBORS.iter().filter_map(move |(dx, dy)| {
            let (nx, ny) = (x + dx, y + dy);
            self.skel.get_signed(nx, ny).then(|| ny as usize * self.w + nx as usize)
        })
    }

    fn build_clusters(&mut self) {
        let n = self.degree.len();
        for start in 0..n {
            if !self.is_junction(start) || self.cluster[start] != 0 {
                continue;
            }
            let id = self.clusters.len() as u32 + 1;
            let mut members = vec![start];
            self.cluster[start] = id;
            let mut q = VecDeque::from([start]);
            while let Some(i) = q.pop_front() {
                let nb: Vec<usize> = self.neighbors(i).collect();
                for j in nb {
                    if self.is_junction(j) && self.cluster[j] == 0 {
                        self.cluster[j] = id;
                        members.push(j);
                        q.push_back(j);
                    }
                }
            }
            members.sort_unstable();
            let (sx, sy) = members.iter().fold((0.0, 0.0), |acc, &i| {
                (acc.0 + (i % self.w) as f64, acc.1 + (i / self.w) as f64)
            });
            let (cx, cy) = (sx / members.len() as f64, sy / members.len() as f64);
            let rep = *members
                .iter()
                .min_by(|&&a, &&b| {
                    let da = ((a % self.w) as f64 - cx).powi(2) + ((a / self.w) as f64 - cy).powi(2);
                    let db = ((b % self.w) as f64 - cx).powi(2) + ((b / self.w) as f64 - cy).powi(2);
                    da.total_cmp(&db).then(a.cmp(&b))
                })
                .expect("cluster is non-empty");
            self.clusters.push(members);
            self.reps.push(rep);
        }
    }

    /// Shortest 8-connected path inside a junction cluster, both ends included.
    fn cluster_path(&self, from: usize, to: usize) -> Vec<usize> {
        if from == to {
            return vec![from];
        }
        let id = self.cluster[from];
        let mut prev = std::collections::HashMap::new();
        prev.insert(from, from);
        let mut q = VecDeque::from([from]);
        while let Some(i) = q.pop_front() {
            if i == to {
                break;
            }
            for j in self.neighbors(i) {
                if self.cluster[j] == id && !prev.contains_key(&j) {
                    prev.insert(j, i);
                    q.push_back(j);
                }
            }
        }
        let mut path = vec![to];
        let mut cur = to;
        while cur != from {
            cur = prev[&cur];
            path.push(cur);
        }
        path.reverse();
        path
    }

    fn rep_of(&self, i: usize) -> usize {
        self.reps[self.cluster[i] as usize - 1]
    }

    fn run(&mut self) {
        for c in 0..self.clusters.len() {
            let members = self.clusters[c].clone();
            let rep = self.reps[c];
            for &m in &members {
                let starts: Vec<usize> = self.neighbors(m).filter(|&j| !self.is_junction(j)).collect();
                for n in starts {
                    if self.visited[n] {
                        continue;
                    }
                    let mut path = self.cluster_path(rep, m);
                    self.walk(m, n, &mut path);
                    self.segments.push(path);
                }
            }
        }
        self.cover_clusters();

        // Junction-free open paths, started from their endpoints.
        let n = self.degree.len();
        for i in 0..n {
            if self.on(i) && !self.visited[i] && self.degree[i] <= 1 {
                let mut path = Vec::new();
                self.visited[i] = true;
                path.push(i);
                let next = self.neighbors(i).find(|&j| !self.visited[j]);
                if let Some(next) = next {
                    self.walk(i, next, &mut path);
                }
                self.segments.push(path);
            }
        }
        // Whatever remains is a closed loop.
        for i in 0..n {
            if self.on(i) && !self.visited[i] {
                self.visited[i] = true;
                let mut path = vec![i];
                let next = self.neighbors(i).find(|&j| !self.visited[j]);
                if let Some(next) = next {
                    self.walk(i, next, &mut path);
                }
                path.push(i);
                self.segments.push(path);
            }
        }
    }

    /// Follows non-junction pixels from `start` (already on `path`) through
    /// `first` until an endpoint or a junction cluster is reached.
    fn walk(&mut self, start: usize, first: usize, path: &mut Vec<usize>) {
        let mut prev = start;
        let mut cur = first;
        loop {
            if self.is_junction(cur) {
                let rep = self.rep_of(cur);
                path.extend(self.cluster_path(cur, rep));
                return;
            }
            self.visited[cur] = true;
            path.push(cur);
            let next = self
                .neighbors(cur)
                .filter(|&j| j != prev)
                .find(|&j| self.is_junction(j) || !self.visited[j]);
            match next {
                Some(j) => {
                    prev = cur;
                    cur = j;
                }
                None => return,
            }
        }
    }

    /// Makes sure every junction pixel lies on some segment.
    fn cover_clusters(&mut self) {
        let mut covered = vec![false; self.degree.len()];
        for s in &self.segments {
            for &i in s {
                covered[i] = true;
            }
        }
        for c in 0..self.clusters.len() {
            let rep = self.reps[c];
            let members = self.clusters[c].clone();
            let missing: Vec<usize> = members.iter().copied().filter(|&m| !covered[m]).collect();
            if missing.is_empty() {
                continue;
            }
            let host = self
                .segments
                .iter()
                .position(|s| s.first() == Some(&rep))
                .map(|p| (p, true))
                .or_else(|| {
                    self.segments
                        .iter()
                        .position(|s| s.last() == Some(&rep))
                        .map(|p| (p, false))
                });
            // Out-and-back excursions from the representative.
            let mut tour = vec![rep];
            let mut cur = rep;
            for u in missing {
                if covered[u] {
                    continue;
                }
                let p = self.cluster_path(cur, u);
                for &i in &p {
                    covered[i] = true;
                }
                tour.extend_from_slice(&p[1..]);
                cur = u;
            }
            let back = self.cluster_path(cur, rep);
            match host {
                Some((p, true)) => {
                    tour.extend_from_slice(&back[1..]);
                    let seg = &mut self.segments[p];
                    tour.extend_from_slice(&seg[1..]);
                    *seg = tour;
                }
                Some((p, false)) => {
                    tour.extend_from_slice(&back[1..]);
                    self.segments[p].extend_from_slice(&tour[1..]);
                }
                None => self.segments.push(tour),
            }
        }
    }
}

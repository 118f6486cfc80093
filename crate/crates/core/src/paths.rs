//! Loop-free k-shortest-path enumeration over the switch graph.
//!
//! Paths are ranked by total link latency with hop count as tie-break and
//! the node sequence itself as a final total-order key, so the result is
//! deterministic for any input. Host links do not participate; paths run
//! switch to switch.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::net::{LinkIdx, NodeIdx, NodeKind, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct PathCost {
    pub latency_us: u64,
    pub hops: usize,
}

/// Up to `k` simple paths from `from` to `to`, cheapest first. `link_up`
/// filters failed links out of the search. A pair with `from == to` yields
/// the single trivial path.
pub fn k_shortest_paths<F>(
    topo: &Topology,
    link_up: F,
    from: NodeIdx,
    to: NodeIdx,
    k: usize,
) -> Vec<(PathCost, Vec<NodeIdx>)>
where
    F: Fn(LinkIdx) -> bool,
{
    if k == 0 || topo.node_kind(from) != NodeKind::Switch || topo.node_kind(to) != NodeKind::Switch
    {
        return Vec::new();
    }
    if from == to {
        return vec![(
            PathCost {
                latency_us: 0,
                hops: 1,
            },
            vec![from],
        )];
    }

    // Best-first enumeration of simple paths. With non-negative weights,
    // complete paths pop from the heap in exact (latency, hops, sequence)
    // order, which is the same total order the exhaustive oracle sorts by.
    let mut found = Vec::new();
    let mut heap: BinaryHeap<Reverse<(u64, usize, Vec<NodeIdx>)>> = BinaryHeap::new();
    heap.push(Reverse((0, 1, vec![from])));
    let mut pops = 0usize;
    while let Some(Reverse((latency, hops, path))) = heap.pop() {
        pops += 1;
        if pops > 200_000 {
            break; // safety valve; fixture graphs never get near this
        }
        let last = *path.last().expect("non-empty path");
        if last == to {
            found.push((
                PathCost {
                    latency_us: latency,
                    hops,
                },
                path,
            ));
            if found.len() >= k {
                break;
            }
            continue;
        }
        for &li in topo.links_of(last) {
            if !link_up(li) {
                continue;
            }
            let def = topo.link(li);
            let peer = def.peer_of(last);
            if topo.node_kind(peer) != NodeKind::Switch || path.contains(&peer) {
                continue;
            }
            let mut next = path.clone();
            next.push(peer);
            heap.push(Reverse((latency + def.latency_us, hops + 1, next)));
        }
    }
    found
}

/// Cheapest path through a required waypoint: best `from -> via` and
/// `via -> to` legs whose concatenation stays simple. Used for quarantine
/// routing through the middlebox switch.
pub fn path_via<F>(
    topo: &Topology,
    link_up: F,
    from: NodeIdx,
    via: NodeIdx,
    to: NodeIdx,
    k: usize,
) -> Option<(PathCost, Vec<NodeIdx>)>
where
    F: Fn(LinkIdx) -> bool + Copy,
{
    if from == via || via == to {
        // waypoint coincides with an endpoint; plain search already covers it
        return k_shortest_paths(topo, link_up, from, to, 1).into_iter().next();
    }
    let first_legs = k_shortest_paths(topo, link_up, from, via, k);
    let second_legs = k_shortest_paths(topo, link_up, via, to, k);
    let mut best: Option<(PathCost, Vec<NodeIdx>)> = None;
    for (c1, p1) in &first_legs {
        for (c2, p2) in &second_legs {
            // keep the concatenation simple (waypoint shared once)
            if p1[..p1.len() - 1].iter().any(|n| p2.contains(n)) {
                continue;
            }
            let mut joined = p1.clone();
            joined.extend_from_slice(&p2[1..]);
            let cost = PathCost {
                latency_us: c1.latency_us + c2.latency_us,
                hops: c1.hops + c2.hops - 1,
            };
            let candidate = (cost, joined);
            if best.as_ref().is_none_or(|b| candidate < *b) {
                best = Some(candidate);
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{LinkDef, NodeDef};

    fn diamond() -> Topology {
        // S1-S2 (1 ms), S2-S4 (1 ms), S1-S3 (5 ms), S3-S4 (5 ms)
        let nodes = ["s1", "s2", "s3", "s4"]
            .iter()
            .map(|n| NodeDef {
                name: n.to_string(),
                kind: NodeKind::Switch,
            })
            .collect();
        let mk = |a: u32, b: u32, lat: u64| LinkDef {
            a: NodeIdx(a),
            b: NodeIdx(b),
            latency_us: lat,
            bandwidth_bps: 1_000_000,
            loss_prob: 0.0,
            max_queue_us: 20_000,
        };
        let links = vec![mk(0, 1, 1000), mk(1, 3, 1000), mk(0, 2, 5000), mk(2, 3, 5000)];
        Topology::new(nodes, links).unwrap()
    }

    #[test]
    fn diamond_rank_order() {
        let t = diamond();
        let paths = k_shortest_paths(&t, |_| true, NodeIdx(0), NodeIdx(3), 2);
        assert_eq!(paths.len(), 2);
        assert_eq!(paths[0].1, vec![NodeIdx(0), NodeIdx(1), NodeIdx(3)]);
        assert_eq!(paths[0].0.latency_us, 2000);
        assert_eq!(paths[1].1, vec![NodeIdx(0), NodeIdx(2), NodeIdx(3)]);
        assert_eq!(paths[1].0.latency_us, 10_000);
    }

    #[test]
    fn k_exceeding_path_count_returns_all() {
        let nodes = vec![
            NodeDef { name: "s1".into(), kind: NodeKind::Switch },
            NodeDef { name: "s2".into(), kind: NodeKind::Switch },
        ];
        let links = vec![LinkDef {
            a: NodeIdx(0),
            b: NodeIdx(1),
            latency_us: 100,
            bandwidth_bps: 1,
            loss_prob: 0.0,
            max_queue_us: 20_000,
        }];
        let t = Topology::new(nodes, links).unwrap();
        let paths = k_shortest_paths(&t, |_| true, NodeIdx(0), NodeIdx(1), 3);
        assert_eq!(paths.len(), 1);
    }

    #[test]
    fn equal_latency_prefers_fewer_hops() {
        // two routes at 4 ms total: direct link vs two 2 ms hops
        let nodes = ["s1", "s2", "s3"]
            .iter()
            .map(|n| NodeDef {
                name: n.to_string(),
                kind: NodeKind::Switch,
            })
            .collect();
        let mk = |a: u32, b: u32, lat: u64| LinkDef {
            a: NodeIdx(a),
            b: NodeIdx(b),
            latency_us: lat,
            bandwidth_bps: 1,
            loss_prob: 0.0,
            max_queue_us: 20_000,
        };
        let t = Topology::new(nodes, vec![mk(0, 2, 4000), mk(0, 1, 2000), mk(1, 2, 2000)]).unwrap();
        let paths = k_shortest_paths(&t, |_| true, NodeIdx(0), NodeIdx(2), 2);
        assert_eq!(paths[0].1.len(), 2, "direct link first");
        assert_eq!(paths[1].1.len(), 3);
    }

    #[test]
    fn failed_links_are_excluded() {
        let t = diamond();
        // kill S1-S2; only the slow branch remains
        let paths = k_shortest_paths(&t, |li| li != LinkIdx(0), NodeIdx(0), NodeIdx(3), 2);
        assert_eq!(paths.len(), 1);
        assert_eq!(paths[0].1, vec![NodeIdx(0), NodeIdx(2), NodeIdx(3)]);
    }

    #[test]
    fn self_pair_is_trivial_path() {
        let t = diamond();
        let paths = k_shortest_paths(&t, |_| true, NodeIdx(0), NodeIdx(0), 3);
        assert_eq!(
            paths,
            vec![(PathCost { latency_us: 0, hops: 1 }, vec![NodeIdx(0)])]
        );
    }

    #[test]
    fn waypoint_path_goes_through_middlebox() {
        let t = diamond();
        let (cost, path) = path_via(&t, |_| true, NodeIdx(0), NodeIdx(2), NodeIdx(3), 3).unwrap();
        assert!(path.contains(&NodeIdx(2)));
        assert_eq!(cost.latency_us, 10_000);
    }

    #[test]
    fn matches_exhaustive_enumeration_on_diamond() {
        fn dfs(
            t: &Topology,
            path: &mut Vec<NodeIdx>,
            latency: u64,
            to: NodeIdx,
            out: &mut Vec<(u64, usize, Vec<NodeIdx>)>,
        ) {
            let last = *path.last().unwrap();
            if last == to {
                out.push((latency, path.len(), path.clone()));
                return;
            }
            for &li in t.links_of(last) {
                let def = t.link(li);
                let peer = def.peer_of(last);
                if t.node_kind(peer) != NodeKind::Switch || path.contains(&peer) {
                    continue;
                }
                path.push(peer);
                dfs(t, path, latency + def.latency_us, to, out);
                path.pop();
            }
        }

        let t = diamond();
        let mut all: Vec<(u64, usize, Vec<NodeIdx>)> = Vec::new();
        dfs(&t, &mut vec![NodeIdx(0)], 0, NodeIdx(3), &mut all);
        all.sort();
        let got = k_shortest_paths(&t, |_| true, NodeIdx(0), NodeIdx(3), 10);
        assert_eq!(got.len(), all.len());
        for ((cost, path), (lat, hops, oracle_path)) in got.iter().zip(all.iter()) {
            assert_eq!(cost.latency_us, *lat);
            assert_eq!(cost.hops, *hops);
            assert_eq!(path, oracle_path);
        }
    }
}

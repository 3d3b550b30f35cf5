use serde::{Deserialize, Serialize};
use tsnas_tensor::{Element, Var};

use crate::error::{CoreError, Result};
use crate::nn::{Ctx, Mixing};
use crate::ops::flat::{FlatEdge, Streams};
use crate::ops::seq::{Bundle, SeqEdge};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    Flat,
    Enc,
    Dec,
}

impl Family {
    pub fn slug(self) -> &'static str {
        match self {
            Family::Flat => "flat",
            Family::Enc => "enc",
            Family::Dec => "dec",
        }
    }

    pub fn n_in(self) -> usize {
        match self {
            Family::Flat => 1,
            _ => 2,
        }
    }
}

/// Fully connected forward DAG: `n_in` inputs, intermediates, then one output node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellTopology {
    pub n_in: usize,
    pub n_intermediate: usize,
}

impl CellTopology {
    pub fn new(family: Family, n_intermediate: usize) -> Result<Self> {
        if n_intermediate == 0 {
            return Err(CoreError::config("a cell needs at least one intermediate node"));
        }
        Ok(CellTopology { n_in: family.n_in(), n_intermediate })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_in + self.n_intermediate + 1
    }

    pub fn output_node(&self) -> usize {
        self.n_nodes() - 1
    }

    /// All (dest, source) pairs, lexicographically ordered; the position is the edge index.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (self.n_in..self.n_nodes()).flat_map(|i| (0..i).map(move |j| (i, j))).collect()
    }

    pub fn n_edges(&self) -> usize {
        self.edges().len()
    }

    pub fn edge_index(&self, dest: usize, src: usize) -> Option<usize> {
        self.edges().iter().position(|&e| e == (dest, src))
    }

    pub fn in_edges(&self, dest: usize) -> Vec<usize> {
        self.edges().iter().enumerate().filter(|(_, e)| e.0 == dest).map(|(i, _)| i).collect()
    }
}

/// (cell k, edge e) of the encoder ↔ (cell k, edge e) of the decoder.
pub fn pair_encoder_decoder_edges(enc: &[CellTopology], dec: &[CellTopology], k: usize, e: usize) -> Result<(usize, usize)> {
    if enc.len() != dec.len() {
        return Err(CoreError::config(format!("{} encoder cells vs {} decoder cells", enc.len(), dec.len())));
    }
    if enc != dec {
        return Err(CoreError::config("encoder and decoder cell topologies differ"));
    }
    if k >= enc.len() || e >= enc[k].n_edges() {
        return Err(CoreError::config(format!("no encoder edge ({k}, {e})")));
    }
    Ok((k, e))
}

/// Edges of one cell; `None` marks an edge absent from a discrete model.
#[derive(Debug, Clone)]
pub struct Cell<E> {
    pub topo: CellTopology,
    pub edges: Vec<Option<E>>,
}

type MixFn<'m, T> = dyn Fn(usize) -> Result<Option<Mixing<T>>> + 'm;

fn no_input(node: usize) -> CoreError {
    CoreError::contract(format!("node {node} has no active in-edge"))
}

impl Cell<FlatEdge> {
    pub fn forward<T: Element>(&self, ctx: &Ctx<T>, input: Streams<T>, mix: &MixFn<T>) -> Result<Streams<T>> {
        let tape = ctx.tape;
        let edges = self.topo.edges();
        let mut nodes: Vec<Streams<T>> = vec![input];
        for i in 1..self.topo.n_nodes() {
            let mut acc: Option<Streams<T>> = None;
            for e in self.topo.in_edges(i) {
                let (Some(edge), Some(m)) = (&self.edges[e], mix(e)?) else { continue };
                let out = edge.forward(ctx, &m, &nodes[edges[e].1])?;
                acc = Some(match acc {
                    None => out,
                    Some(a) => Streams { b: tape.add(&a.b, &out.b)?, f: tape.add(&a.f, &out.f)? },
                });
            }
            nodes.push(acc.ok_or_else(|| no_input(i))?);
        }
        Ok(nodes.pop().expect("output node"))
    }
}

impl Cell<SeqEdge> {
    /// Returns the cell output and, per edge, the bundle its paired decoder edge reads.
    pub fn encode<T: Element>(&self, ctx: &Ctx<T>, inputs: [Var<T>; 2], mix: &MixFn<T>) -> Result<(Var<T>, Vec<Bundle<T>>)> {
        let tape = ctx.tape;
        let edges = self.topo.edges();
        let [a, b] = inputs;
        let (bs, l, d) = (a.dim(0), a.dim(1), a.dim(2));
        let mut nodes = vec![a, b];
        let mut bundles: Vec<Option<Bundle<T>>> = vec![None; edges.len()];
        for i in self.topo.n_in..self.topo.n_nodes() {
            let mut acc: Option<Var<T>> = None;
            for e in self.topo.in_edges(i) {
                let (Some(edge), Some(m)) = (&self.edges[e], mix(e)?) else { continue };
                let bundle = edge.encode(ctx, &m, &nodes[edges[e].1])?;
                acc = Some(match acc {
                    None => bundle.full.clone(),
                    Some(x) => tape.add(&x, &bundle.full)?,
                });
                bundles[e] = Some(bundle);
            }
            nodes.push(acc.ok_or_else(|| no_input(i))?);
        }
        let bundles = bundles.into_iter().map(|b| b.unwrap_or_else(|| Bundle::zeros(ctx, bs, l, d))).collect();
        Ok((nodes.pop().expect("output node"), bundles))
    }

    pub fn decode<T: Element>(
        &self,
        ctx: &Ctx<T>,
        inputs: [Var<T>; 2],
        paired: &[Bundle<T>],
        memory: &Var<T>,
        mix: &MixFn<T>,
    ) -> Result<Var<T>> {
        let tape = ctx.tape;
        let edges = self.topo.edges();
        if paired.len() != edges.len() {
            return Err(CoreError::config(format!("{} paired bundles for {} decoder edges", paired.len(), edges.len())));
        }
        let [a, b] = inputs;
        let mut nodes = vec![a, b];
        for i in self.topo.n_in..self.topo.n_nodes() {
            let mut acc: Option<Var<T>> = None;
            for e in self.topo.in_edges(i) {
                let (Some(edge), Some(m)) = (&self.edges[e], mix(e)?) else { continue };
                let out = edge.decode(ctx, &m, &nodes[edges[e].1], Some(&paired[e]), Some(memory))?;
                acc = Some(match acc {
                    None => out,
                    Some(x) => tape.add(&x, &out)?,
                });
            }
            nodes.push(acc.ok_or_else(|| no_input(i))?);
        }
        Ok(nodes.pop().expect("output node"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seq_and_flat_edge_lists() {
        let s = CellTopology::new(Family::Enc, 2).unwrap();
        assert_eq!(s.n_edges(), 9);
        assert_eq!(s.edges()[..3], [(2, 0), (2, 1), (3, 0)]);
        assert_eq!(s.in_edges(4), vec![5, 6, 7, 8]);
        let f = CellTopology::new(Family::Flat, 2).unwrap();
        assert_eq!(f.edges(), vec![(1, 0), (2, 0), (2, 1), (3, 0), (3, 1), (3, 2)]);
        assert!(CellTopology::new(Family::Flat, 0).is_err());
    }

    #[test]
    fn pairing_is_identity_and_bijective() {
        let t = vec![CellTopology::new(Family::Enc, 2).unwrap(); 2];
        assert_eq!(pair_encoder_decoder_edges(&t, &t, 0, 0).unwrap(), (0, 0));
        let mut seen = std::collections::HashSet::new();
        for k in 0..2 {
            for e in 0..9 {
                assert!(seen.insert(pair_encoder_decoder_edges(&t, &t, k, e).unwrap()));
            }
        }
        assert_eq!(seen.len(), 18);
        assert!(pair_encoder_decoder_edges(&t, &t[..1], 0, 0).is_err());
        let other = vec![CellTopology::new(Family::Enc, 3).unwrap(); 2];
        assert!(pair_encoder_decoder_edges(&t, &other, 0, 0).is_err());
    }
}

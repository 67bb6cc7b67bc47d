use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nncore::layers::{self, bias_name, weight_name, LayerSpec};
use crate::nncore::{ParamStore, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Input,
    Node(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub name: String,
    pub layer: LayerSpec,
    pub inputs: Vec<Source>,
}

/// A directed acyclic graph of layers with a single input and whose last
/// node is the output. Nodes may only read the graph input or earlier nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub name: String,
    pub nodes: Vec<Node>,
}

/// Everything a forward pass produced; consumed by [`Network::backward`].
#[derive(Clone, Debug)]
pub struct Trace<T> {
    pub input: Tensor<T>,
    pub outputs: Vec<Tensor<T>>,
}

impl<T> Trace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.outputs.last().expect("network has no nodes")
    }
}

/// Incremental graph builder. Each `push` returns the new node's source tag.
#[derive(Debug)]
pub struct NetworkBuilder {
    net: Network,
}

impl NetworkBuilder {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            net: Network {
                name: name.into(),
                nodes: Vec::new(),
            },
        }
    }

    pub fn push(&mut self, name: impl Into<String>, layer: LayerSpec, inputs: &[Source]) -> Source {
        self.net.nodes.push(Node {
            name: name.into(),
            layer,
            inputs: inputs.to_vec(),
        });
        Source::Node(self.net.nodes.len() - 1)
    }

    pub fn finish(self) -> Network {
        self.net
    }
}

impl Network {
    fn check_sources(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            for s in &node.inputs {
                if let Source::Node(j) = s {
                    if *j >= i {
                        return Err(Error::Contract(format!(
                            "{}: node {} reads a later node",
                            self.name, node.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn param_names(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter(|n| n.layer.has_params())
            .flat_map(|n| [weight_name(&n.name), bias_name(&n.name)])
            .collect()
    }

    /// Registers this network's parameters: weights `N(0, 2/fan_in)`,
    /// biases zero.
    pub fn init_params<T: Scalar>(&self, params: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        self.check_sources()?;
        for node in &self.nodes {
            if let Some((w, b, fan_in)) = node.layer.param_shapes() {
                params.insert_he(weight_name(&node.name), w, fan_in, rng)?;
                params.insert_zeros(bias_name(&node.name), b)?;
            }
        }
        Ok(())
    }

    /// Checks that `params` holds every entry with the expected shape.
    pub fn check_params<T: Scalar>(&self, params: &ParamStore<T>) -> Result<()> {
        for node in &self.nodes {
            if let Some((w, b, _)) = node.layer.param_shapes() {
                for (name, shape) in [(weight_name(&node.name), w), (bias_name(&node.name), b)] {
                    let e = params.get(&name)?;
                    if e.shape != shape {
                        return Err(Error::Contract(format!(
                            "{name}: shape {:?}, architecture expects {shape:?}",
                            e.shape
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn gather<'a, T>(&self, node: &Node, input: &'a Tensor<T>, outputs: &'a [Tensor<T>]) -> Vec<&'a Tensor<T>> {
        node.inputs
            .iter()
            .map(|s| match s {
                Source::Input => input,
                Source::Node(j) => &outputs[*j],
            })
            .collect()
    }

    pub fn forward<T: Scalar>(&self, params: &ParamStore<T>, input: Tensor<T>) -> Result<Trace<T>> {
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let ins = self.gather(node, &input, &outputs);
            let out = layers::forward_raw(&node.name, &node.layer, &ins, params)?;
            outputs.push(out);
        }
        if outputs.is_empty() {
            return Err(Error::Contract(format!("{} has no nodes", self.name)));
        }
        Ok(Trace { input, outputs })
    }

    /// Forward pass that drops intermediate activations once they are no
    /// longer needed.
    pub fn infer<T: Scalar>(&self, params: &ParamStore<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
        let count = self.nodes.len();
        let mut last_use = vec![0usize; count];
        for (i, node) in self.nodes.iter().enumerate() {
            for s in &node.inputs {
                if let Source::Node(j) = s {
                    last_use[*j] = i;
                }
            }
        }
        let mut outputs: Vec<Option<Tensor<T>>> = vec![None; count];
        for (i, node) in self.nodes.iter().enumerate() {
            let ins: Vec<&Tensor<T>> = node
                .inputs
                .iter()
                .map(|s| match s {
                    Source::Input => Ok(input),
                    Source::Node(j) => outputs[*j]
                        .as_ref()
                        .ok_or_else(|| Error::Contract(format!("{}: node {j} freed early", self.name))),
                })
                .collect::<Result<_>>()?;
            let out = layers::forward_raw(&node.name, &node.layer, &ins, params)?;
            outputs[i] = Some(out);
            for s in &node.inputs {
                if let Source::Node(j) = s {
                    if last_use[*j] == i {
                        outputs[*j] = None;
                    }
                }
            }
        }
        outputs
            .pop()
            .flatten()
            .ok_or_else(|| Error::Contract(format!("{} has no nodes", self.name)))
    }

    /// Backpropagates `grad_out` (gradient w.r.t. the network output)
    /// through the trace, accumulating parameter gradients. Returns the
    /// gradient w.r.t. the network input.
    pub fn backward<T: Scalar>(
        &self,
        params: &mut ParamStore<T>,
        trace: &Trace<T>,
        grad_out: Tensor<T>,
    ) -> Result<Tensor<T>> {
        if trace.outputs.len() != self.nodes.len() {
            return Err(Error::Contract(format!("{}: trace from a different network", self.name)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        *grads.last_mut().unwrap() = Some(grad_out);
        let mut grad_input: Option<Tensor<T>> = None;
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let ins = self.gather(node, &trace.input, &trace.outputs);
            let gins = layers::backward_raw(&node.name, &node.layer, &ins, &trace.outputs[i], &g, params)?;
            for (s, gi) in node.inputs.iter().zip(gins) {
                let slot = match s {
                    Source::Input => &mut grad_input,
                    Source::Node(j) => &mut grads[*j],
                };
                match slot {
                    Some(acc) => acc.data.iter_mut().zip(&gi.data).for_each(|(a, b)| *a += *b),
                    None => *slot = Some(gi),
                }
            }
        }
        Ok(grad_input.unwrap_or_else(|| {
            let x = &trace.input;
            Tensor::zeros(x.n, x.h, x.w, x.c)
        }))
    }

    /// Text description of the layer graph, one node per line.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "network {}", self.name);
        for node in &self.nodes {
            let srcs: Vec<String> = node
                .inputs
                .iter()
                .map(|s| match s {
                    Source::Input => "input".to_string(),
                    Source::Node(j) => self.nodes[*j].name.clone(),
                })
                .collect();
            let _ = writeln!(out, "{} {} <- {}", node.name, node.layer, srcs.join(","));
        }
        out
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, input: [usize; 4]) -> Result<[usize; 4]> {
        let mut shapes: Vec<[usize; 4]> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let ins: Vec<[usize; 4]> = node
                .inputs
                .iter()
                .map(|s| match s {
                    Source::Input => input,
                    Source::Node(j) => shapes[*j],
                })
                .collect();
            shapes.push(layers::output_shape(&node.name, &node.layer, &ins)?);
        }
        shapes
            .last()
            .copied()
            .ok_or_else(|| Error::Contract(format!("{} has no nodes", self.name)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::layers::ConvSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn skip_net() -> Network {
        let mut b = NetworkBuilder::new("t");
        let c1 = b.push("c1", LayerSpec::Conv2d(ConvSpec::same(2, 3)), &[Source::Input]);
        let r1 = b.push("r1", LayerSpec::Relu, &[c1]);
        let c2 = b.push("c2", LayerSpec::Conv2d(ConvSpec::same(3, 3)), &[r1]);
        let j = b.push("j", LayerSpec::Concat, &[r1, c2]);
        b.push("c3", LayerSpec::Conv2d(ConvSpec::same(6, 1)), &[j]);
        b.finish()
    }

    #[test]
    fn infer_matches_forward() {
        let net = skip_net();
        let mut p = ParamStore::<f64>::new();
        net.init_params(&mut p, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = Tensor::from_vec(2, 4, 5, 2, (0..80).map(|v| (v as f64 * 0.1).sin()).collect()).unwrap();
        let t = net.forward(&p, x.clone()).unwrap();
        assert_eq!(&net.infer(&p, &x).unwrap(), t.output());
        assert_eq!(net.output_shape([2, 4, 5, 2]).unwrap(), [2, 4, 5, 1]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        use crate::nncore::gradcheck::{check_gradients, GradCheckConfig};
        use crate::nncore::ParamEntry;

        let net = skip_net();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = ParamStore::<f64>::new();
        net.init_params(&mut p, &mut rng).unwrap();
        for (_, e) in p.iter_mut() {
            e.value.iter_mut().for_each(|v| *v += 0.05);
        }
        let x: Vec<f64> = (0..60).map(|v| ((v * 7 % 13) as f64 - 6.0) * 0.3).collect();
        p.insert("input", ParamEntry::new(vec![60], x).unwrap()).unwrap();
        let loss = |p: &mut ParamStore<f64>, grad: bool| -> Result<f64> {
            let x = Tensor::from_vec(2, 3, 5, 2, p.get("input")?.value.clone())?;
            let t = net.forward(p, x)?;
            let out = t.output();
            let l = out.data.iter().enumerate().map(|(i, v)| v * v * (1.0 + i as f64 * 0.1)).sum();
            if grad {
                let g: Vec<f64> = out.data.iter().enumerate().map(|(i, v)| 2.0 * v * (1.0 + i as f64 * 0.1)).collect();
                let go = Tensor::from_vec(out.n, out.h, out.w, out.c, g)?;
                let gi = net.backward(p, &t, go)?;
                p.get_mut("input")?.grad.iter_mut().zip(&gi.data).for_each(|(a, b)| *a += b);
            }
            Ok(l)
        };
        let r = check_gradients(&mut p, loss, GradCheckConfig::default(), &mut rng).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn manifest_lists_every_node() {
        let m = skip_net().manifest();
        assert_eq!(m.lines().count(), 6);
        assert!(m.contains("j concat <- r1,c2"));
    }

    #[test]
    fn later_node_reference_rejected() {
        let net = Network {
            name: "bad".into(),
            nodes: vec![Node {
                name: "a".into(),
                layer: LayerSpec::Relu,
                inputs: vec![Source::Node(0)],
            }],
        };
        let mut p = ParamStore::<f32>::new();
        assert!(net.init_params(&mut p, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}

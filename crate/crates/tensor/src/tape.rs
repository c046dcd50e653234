use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward rule sees: the forward inputs and output, the incoming
/// gradient, and which inputs actually want a gradient.
pub struct Backward<'a, T: Real> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
    pub needs: Vec<bool>,
}

pub(crate) type Rule<T> = Box<dyn FnOnce(&Backward<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    op: &'static str,
    value: Tensor<T>,
    parents: Vec<usize>,
    requires_grad: bool,
    rule: Option<Rule<T>>,
}

/// Append-only record of a forward pass.
///
/// Every primitive checks its output for non-finite values. `backward`
/// consumes the recorded rules, so a tape supports exactly one backward pass.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op: "leaf", value, parents: Vec::new(), requires_grad, rule: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Handles of every recorded entry, oldest first.
    pub fn entries(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    pub(crate) fn any_requires_grad(&self, parents: &[Var]) -> bool {
        parents.iter().any(|p| self.nodes[p.0].requires_grad)
    }

    /// Records a primitive. The rule is dropped when no parent needs gradients.
    pub(crate) fn push(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[Var],
        rule: Rule<T>,
    ) -> Result<Var> {
        value.ensure_finite(op)?;
        let requires_grad = self.any_requires_grad(parents);
        self.nodes.push(Node {
            op,
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            requires_grad,
            rule: requires_grad.then_some(rule),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(TensorError::BackwardReplayed);
        }
        let loss_shape = self.nodes[loss.0].value.shape().to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape));
        }
        self.consumed = true;

        let mut rules: Vec<Option<Rule<T>>> =
            self.nodes.iter_mut().map(|n| n.rule.take()).collect();
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(&loss_shape));
        let mut visited = 0;

        for i in (0..=loss.0).rev() {
            let Some(rule) = rules[i].take() else { continue };
            // interior gradients are released once propagated; leaves keep theirs
            let Some(grad) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let ctx = Backward {
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                output: &node.value,
                grad: &grad,
                needs: node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect(),
            };
            let parent_grads = rule(&ctx);
            visited += 1;
            for (k, pg) in parent_grads.into_iter().enumerate() {
                let p = node.parents[k];
                let Some(pg) = pg else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                pg.ensure_finite(node.op)?;
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads, visited })
    }
}

/// Gradients produced by one backward sweep.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    visited: usize,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Number of recorded rules that ran.
    pub fn rules_run(&self) -> usize {
        self.visited
    }
}

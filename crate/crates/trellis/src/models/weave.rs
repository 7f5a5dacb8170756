//! Graph convolution over molecules: the weave module.
//!
//! A molecule with N atoms carries one feature vector per atom and one per
//! ordered atom pair, with the pair features symmetric. One weave layer
//! mixes the two levels with six learned functions: atoms update from
//! their own features and the sum of their incident pair features; pairs
//! update from both orderings of their endpoint atoms plus their own
//! features. Layers preserve the feature dimensions, so weave modules
//! stack arbitrarily.
//!
//! Host input is a map `{"atoms": [[f; n]; N], "pairs": [[[f; m]; N]; N]}`;
//! [`Weave::reader`] turns it into the tuple of sequences the module
//! consumes.

use crate::blocks::{Block, Composition, Wire};
use crate::error::Result;
use crate::ops::{self, Activation, OpHandle};
use crate::tensor::DType;
use crate::types::TensorType;

/// Dimensions for [`Weave`]. `name_prefix` distinguishes the operations of
/// independently trained layers; layers built from one `Weave` share
/// parameters.
pub struct WeaveConfig {
    pub atom_dim: usize,
    pub pair_dim: usize,
    pub name_prefix: String,
    pub dtype: DType,
}

impl WeaveConfig {
    pub fn new(atom_dim: usize, pair_dim: usize) -> WeaveConfig {
        WeaveConfig { atom_dim, pair_dim, name_prefix: String::new(), dtype: DType::Float32 }
    }
}

/// One stackable weave layer and its six learned functions.
pub struct Weave {
    atom_t: TensorType,
    pair_t: TensorType,
    pub atom_self: OpHandle,
    pub pair_to_atom: OpHandle,
    pub atom_out: OpHandle,
    pub atoms_to_pair: OpHandle,
    pub pair_self: OpHandle,
    pub pair_out: OpHandle,
}

impl Weave {
    pub fn new(config: WeaveConfig) -> Weave {
        let (n, m) = (config.atom_dim, config.pair_dim);
        let p = &config.name_prefix;
        let fc = |name: String, ins: &[usize], out: usize| {
            ops::fully_connected(&name, ins, out, Activation::Relu, config.dtype)
        };
        Weave {
            atom_t: TensorType::new(config.dtype, &[n]),
            pair_t: TensorType::new(config.dtype, &[m]),
            atom_self: fc(format!("{p}f_aa"), &[n], n),
            pair_to_atom: fc(format!("{p}f_pa"), &[m], n),
            atom_out: fc(format!("{p}f_a"), &[n, n], n),
            atoms_to_pair: fc(format!("{p}f_ap"), &[n, n], m),
            pair_self: fc(format!("{p}f_pp"), &[m], m),
            pair_out: fc(format!("{p}f_p"), &[m, m], m),
        }
    }

    /// Every operation the weave blocks invoke.
    pub fn ops(&self) -> Vec<OpHandle> {
        vec![
            self.atom_self.clone(),
            self.pair_to_atom.clone(),
            self.atom_out.clone(),
            self.atoms_to_pair.clone(),
            self.pair_self.clone(),
            self.pair_out.clone(),
        ]
    }

    /// Molecule map to the (atom sequence, pair matrix) tuple.
    pub fn reader(&self) -> Block {
        Block::record(vec![
            ("atoms", Block::map(Block::tensor_literal(self.atom_t.clone()))),
            ("pairs", Block::map(Block::map(Block::tensor_literal(self.pair_t.clone())))),
        ])
    }

    /// Updates the pair features along one atom's row: the input is
    /// (that atom's features, the whole atom sequence), and the output
    /// applies the atom-pair function in both argument orders and sums.
    fn pair_row(&self) -> Result<Block> {
        let mut comp = Composition::new();
        let a_i = comp.add(Block::broadcast(), &[Wire::input_field(0)]);
        let f_i_j = comp.add(
            Block::zip_with(Block::function(&self.atoms_to_pair)),
            &[a_i.wire(), Wire::input_field(1)],
        );
        let f_j_i = comp.add(
            Block::zip_with(Block::function(&self.atoms_to_pair)),
            &[Wire::input_field(1), a_i.wire()],
        );
        let row = comp.add(Block::zip_with(Block::sum()), &[f_i_j.wire(), f_j_i.wire()]);
        comp.set_output(&[row.wire()]);
        comp.into_block()
    }

    /// One weave layer over the (atoms, pairs) tuple. Compose after
    /// [`Weave::reader`] or another layer.
    pub fn module(&self) -> Result<Block> {
        let mut comp = Composition::new();
        let a_to_a =
            comp.add(Block::map(Block::function(&self.atom_self)), &[Wire::input_field(0)]);
        let p_to_a = comp.add(
            Block::map(Block::map(Block::function(&self.pair_to_atom)) >> Block::sum()),
            &[Wire::input_field(1)],
        );
        let a_y = comp.add(
            Block::zip_with(Block::function(&self.atom_out)),
            &[a_to_a.wire(), p_to_a.wire()],
        );
        let all_atoms = comp.add(Block::broadcast(), &[Wire::input_field(0)]);
        let a_to_p = comp.add(
            Block::zip_with(self.pair_row()?),
            &[Wire::input_field(0), all_atoms.wire()],
        );
        let p_to_p = comp.add(
            Block::map(Block::map(Block::function(&self.pair_self))),
            &[Wire::input_field(1)],
        );
        let p_y = comp.add(
            Block::zip_with(Block::zip_with(Block::function(&self.pair_out))),
            &[a_to_p.wire(), p_to_p.wire()],
        );
        comp.set_output(&[a_y.wire(), p_y.wire()]);
        comp.into_block()
    }

    /// Molecule map through `layers` stacked weave layers, all sharing
    /// this model's six functions.
    pub fn network(&self, layers: usize) -> Result<Block> {
        let mut block = self.reader();
        for _ in 0..layers {
            block = block >> self.module()?;
        }
        Ok(block)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compile::Compiler;
    use crate::host::HostValue;
    use crate::models::init_params;
    use crate::ops::Mode;
    use crate::reference;
    use crate::runtime::params::ParameterStore;

    fn molecule(atoms: &[Vec<f64>], pairs: &[Vec<Vec<f64>>]) -> HostValue {
        let row = |r: &Vec<f64>| HostValue::List(r.iter().map(|v| HostValue::Float(*v)).collect());
        HostValue::map(vec![
            ("atoms", HostValue::List(atoms.iter().map(row).collect())),
            (
                "pairs",
                HostValue::List(
                    pairs
                        .iter()
                        .map(|r| HostValue::List(r.iter().map(row).collect()))
                        .collect(),
                ),
            ),
        ])
    }

    fn sample(n_atoms: usize, atom_dim: usize, pair_dim: usize) -> HostValue {
        let atoms: Vec<Vec<f64>> = (0..n_atoms)
            .map(|i| (0..atom_dim).map(|k| 0.3 * (i as f64) - 0.1 * (k as f64) + 0.2).collect())
            .collect();
        let pairs: Vec<Vec<Vec<f64>>> = (0..n_atoms)
            .map(|i| {
                (0..n_atoms)
                    .map(|j| {
                        (0..pair_dim)
                            .map(|k| {
                                if i == j {
                                    0.0
                                } else {
                                    0.05 * ((i + j) as f64) + 0.01 * (k as f64) * ((i * j) as f64)
                                }
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        molecule(&atoms, &pairs)
    }

    #[test]
    fn feature_counts_and_shapes_are_preserved() {
        let weave = Weave::new(WeaveConfig::new(3, 2));
        let compiler = Compiler::new(weave.network(1).unwrap()).unwrap();
        let params = init_params(&compiler.ops(), 17).unwrap();

        let graph = compiler.trace(&sample(4, 3, 2)).unwrap();
        let run = reference::run_forward(&graph, &params, Mode::Infer).unwrap();
        let values = &run.results[0];
        assert_eq!(values.len(), 4 + 16);
        for atom in &values[..4] {
            assert_eq!(atom.shape(), &[3]);
        }
        for pair in &values[4..] {
            assert_eq!(pair.shape(), &[2]);
        }
    }

    #[test]
    fn updated_pair_features_stay_symmetric() {
        let weave = Weave::new(WeaveConfig::new(3, 2));
        let compiler = Compiler::new(weave.network(1).unwrap()).unwrap();
        let params = init_params(&compiler.ops(), 23).unwrap();

        let n = 3;
        let graph = compiler.trace(&sample(n, 3, 2)).unwrap();
        let run = reference::run_forward(&graph, &params, Mode::Infer).unwrap();
        let pairs = &run.results[0][n..];
        for i in 0..n {
            for j in 0..n {
                let ij = pairs[i * n + j].to_f64_vec();
                let ji = pairs[j * n + i].to_f64_vec();
                for (a, b) in ij.iter().zip(&ji) {
                    assert!((a - b).abs() < 1e-6, "pair ({i},{j}) broke symmetry");
                }
            }
        }
    }

    #[test]
    fn stacked_layers_type_check_and_run() {
        let weave = Weave::new(WeaveConfig::new(2, 3));
        let compiler = Compiler::new(weave.network(3).unwrap()).unwrap();
        let params = init_params(&compiler.ops(), 31).unwrap();

        let graph = compiler.trace(&sample(2, 2, 3)).unwrap();
        let run = reference::run_forward(&graph, &params, Mode::Infer).unwrap();
        assert_eq!(run.results[0].len(), 2 + 4);
    }

    #[test]
    fn matches_a_dense_oracle() {
        let mut config = WeaveConfig::new(2, 2);
        config.dtype = DType::Float64;
        let weave = Weave::new(config);
        let compiler = Compiler::new(weave.network(1).unwrap()).unwrap();
        let params = init_params(&compiler.ops(), 47).unwrap();

        let atoms = vec![vec![0.5, -0.25], vec![1.5, 0.75]];
        let pairs = vec![
            vec![vec![0.0, 0.0], vec![0.4, -0.8]],
            vec![vec![0.4, -0.8], vec![0.0, 0.0]],
        ];

        let fc = |name: &str, inputs: &[&[f64]]| -> Vec<f64> {
            let b = params.get(&format!("{name}/b")).unwrap().to_f64_vec();
            let mut out = b;
            for (slot, x) in inputs.iter().enumerate() {
                let w = params.get(&format!("{name}/w{slot}")).unwrap();
                let cols = w.shape()[1];
                let wv = w.to_f64_vec();
                for (i, xi) in x.iter().enumerate() {
                    for k in 0..cols {
                        out[k] += xi * wv[i * cols + k];
                    }
                }
            }
            out.iter().map(|v| v.max(0.0)).collect()
        };

        let mut want_atoms = Vec::new();
        let mut want_pairs = Vec::new();
        for i in 0..2 {
            let own = fc("f_aa", &[&atoms[i]]);
            let mut incident = vec![0.0; 2];
            for j in 0..2 {
                for (acc, v) in incident.iter_mut().zip(fc("f_pa", &[&pairs[i][j]])) {
                    *acc += v;
                }
            }
            want_atoms.push(fc("f_a", &[&own, &incident]));
        }
        for i in 0..2 {
            for j in 0..2 {
                let fwd = fc("f_ap", &[&atoms[i], &atoms[j]]);
                let rev = fc("f_ap", &[&atoms[j], &atoms[i]]);
                let both: Vec<f64> = fwd.iter().zip(&rev).map(|(a, b)| a + b).collect();
                let own = fc("f_pp", &[&pairs[i][j]]);
                want_pairs.push(fc("f_p", &[&both, &own]));
            }
        }

        let graph = compiler.trace(&molecule(&atoms, &pairs)).unwrap();
        let run = reference::run_forward(&graph, &params, Mode::Infer).unwrap();
        let values = &run.results[0];
        for (got, want) in values[..2].iter().zip(&want_atoms) {
            for (g, w) in got.to_f64_vec().iter().zip(want) {
                assert!((g - w).abs() < 1e-12, "{g} vs {w}");
            }
        }
        for (got, want) in values[2..].iter().zip(&want_pairs) {
            for (g, w) in got.to_f64_vec().iter().zip(want) {
                assert!((g - w).abs() < 1e-12, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn prefixed_layers_can_stack_untied() {
        let first = Weave::new(WeaveConfig::new(2, 2));
        let mut second_config = WeaveConfig::new(2, 2);
        second_config.name_prefix = "deep/".to_string();
        let second = Weave::new(second_config);

        let block = first.network(1).unwrap() >> second.module().unwrap();
        let compiler = Compiler::new(block).unwrap();
        let mut params = ParameterStore::new();
        crate::models::init_params_into(&mut params, &compiler.ops(), 3).unwrap();

        let graph = compiler.trace(&sample(3, 2, 2)).unwrap();
        let run = reference::run_forward(&graph, &params, Mode::Infer).unwrap();
        assert_eq!(run.results[0].len(), 3 + 9);
    }
}

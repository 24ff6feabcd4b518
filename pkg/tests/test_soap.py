"""Local-environment descriptor properties and oracles."""

import numpy as np
import pytest

from matterbridge.crystal import Structure
from matterbridge.errors import ValidationError
from matterbridge.soap import (SoapConfig, descriptor_length, radial_basis,
                               soap_descriptor)

from helpers import random_structure


def special_orthogonal(rng):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


class TestConfig:
    def test_defaults(self):
        cfg = SoapConfig()
        assert cfg.r_cut == 6.0
        assert cfg.n_max == 8
        assert cfg.l_max == 6
        assert cfg.periodic is True

    def test_validation(self):
        with pytest.raises(ValidationError):
            SoapConfig(r_cut=0.0)
        with pytest.raises(ValidationError):
            SoapConfig(n_max=0)
        with pytest.raises(ValidationError):
            SoapConfig(l_max=0)
        with pytest.raises(ValidationError):
            SoapConfig(sigma=-1.0)
        with pytest.raises(ValidationError):
            SoapConfig(species=("Si", "Si"))


class TestRadialBasis:
    def test_orthonormal_under_r2_measure(self):
        cfg = SoapConfig()
        r, w, G = radial_basis(cfg)
        overlap = (G * (w * r * r)) @ G.T
        np.testing.assert_allclose(overlap, np.eye(cfg.n_max), atol=1e-10)

    def test_various_sizes(self):
        for n_max in (1, 2, 5, 10):
            cfg = SoapConfig(n_max=n_max)
            r, w, G = radial_basis(cfg)
            overlap = (G * (w * r * r)) @ G.T
            np.testing.assert_allclose(overlap, np.eye(n_max), atol=1e-9)


class TestDescriptor:
    def setup_method(self):
        self.cfg = SoapConfig(n_max=4, l_max=3)
        self.rng = np.random.default_rng(77)

    def test_shape_and_unit_norm(self):
        s = random_structure(self.rng, n_min=3, n_max=6)
        d = soap_descriptor(s, self.cfg)
        assert d.shape == (len(s.species), descriptor_length(self.cfg))
        np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0,
                                   atol=1e-12)

    def test_length_formula(self):
        cfg = SoapConfig(n_max=8, l_max=6)
        n_sp = len(cfg.species)
        same = 8 * 9 // 2 * 7
        cross = 64 * 7
        assert descriptor_length(cfg) == n_sp * same \
            + n_sp * (n_sp - 1) // 2 * cross

    def test_translation_invariance(self):
        for _ in range(6):
            s = random_structure(self.rng, n_min=2, n_max=6)
            shift = self.rng.uniform(0, 1, 3)
            moved = Structure(s.material_id, s.lattice, s.species,
                              (s.frac_coords + shift) % 1.0)
            np.testing.assert_allclose(soap_descriptor(s, self.cfg),
                                       soap_descriptor(moved, self.cfg),
                                       atol=1e-8)

    def test_rotation_invariance(self):
        for _ in range(6):
            s = random_structure(self.rng, n_min=2, n_max=6)
            q = special_orthogonal(self.rng)
            rotated = Structure(s.material_id, s.lattice @ q, s.species,
                                s.frac_coords)
            np.testing.assert_allclose(soap_descriptor(s, self.cfg),
                                       soap_descriptor(rotated, self.cfg),
                                       atol=1e-8)

    def test_permutation_invariance(self):
        for _ in range(6):
            s = random_structure(self.rng, n_min=2, n_max=6)
            perm = self.rng.permutation(len(s.species))
            mixed = Structure(s.material_id, s.lattice,
                              [s.species[i] for i in perm],
                              s.frac_coords[perm])
            np.testing.assert_allclose(soap_descriptor(s, self.cfg)[perm],
                                       soap_descriptor(mixed, self.cfg),
                                       atol=1e-8)

    def test_rock_salt_site_equivalence(self):
        lattice = np.eye(3) * 5.64
        frac = np.array([
            [0, 0, 0], [0, .5, .5], [.5, 0, .5], [.5, .5, 0],
            [.5, .5, .5], [.5, 0, 0], [0, .5, 0], [0, 0, .5],
        ], dtype=float)
        species = ["Na"] * 4 + ["Cl"] * 4
        s = Structure("rock-salt", lattice, species, frac)
        d = soap_descriptor(s, SoapConfig(n_max=4, l_max=3,
                                          species=("Cl", "Na")))
        for i in (1, 2, 3):
            np.testing.assert_allclose(d[0], d[i], atol=1e-10)
        for i in (5, 6, 7):
            np.testing.assert_allclose(d[4], d[i], atol=1e-10)
        assert np.abs(d[0] - d[4]).max() > 1e-3

    def test_angular_channels_discriminate(self):
        # same distance multiset, different bond angles
        lattice = np.eye(3) * 4.0
        cfg = SoapConfig(n_max=4, l_max=4, species=("Si",))
        right = Structure("a", lattice, ["Si"] * 3,
                          np.array([[0, 0, 0], [.5, 0, 0], [0, .5, 0]]))
        bent = Structure("b", lattice, ["Si"] * 3,
                         np.array([[0, 0, 0], [.5, 0, 0],
                                   [.25, .4330127, 0]]))
        da = soap_descriptor(right, cfg)
        db = soap_descriptor(bent, cfg)
        assert np.abs(da[0] - db[0]).max() > 1e-3

    def test_supercell_consistency(self):
        # doubling the cell leaves every local environment unchanged
        s = random_structure(self.rng, n_min=2, n_max=4)
        doubled_lattice = s.lattice.copy()
        doubled_lattice[2] *= 2.0
        frac = s.frac_coords.copy()
        frac[:, 2] *= 0.5
        shifted = frac + np.array([0.0, 0.0, 0.5])
        big = Structure("super", doubled_lattice,
                        s.species + s.species,
                        np.vstack([frac, shifted]))
        d_small = soap_descriptor(s, self.cfg)
        d_big = soap_descriptor(big, self.cfg)
        n = len(s.species)
        np.testing.assert_allclose(d_big[:n], d_small, atol=1e-9)
        np.testing.assert_allclose(d_big[n:], d_small, atol=1e-9)

    def test_unregistered_species_error(self):
        s = Structure("x", np.eye(3) * 4.0, ["Au"],
                      np.zeros((1, 3)))
        with pytest.raises(ValidationError, match="Au"):
            soap_descriptor(s, self.cfg)

    def test_deterministic(self):
        s = random_structure(self.rng, n_min=3, n_max=5)
        a = soap_descriptor(s, self.cfg)
        b = soap_descriptor(s, self.cfg)
        np.testing.assert_array_equal(a, b)

    def test_isolated_atom_still_has_descriptor(self):
        # huge cell: only the central atom's own density contributes
        s = Structure("lone", np.eye(3) * 30.0, ["Si"],
                      np.array([[0.5, 0.5, 0.5]]))
        d = soap_descriptor(s, self.cfg)
        assert np.isfinite(d).all()
        assert abs(np.linalg.norm(d[0]) - 1.0) < 1e-12

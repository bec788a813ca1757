//! Hencky-strain elasticity with Drucker-Prager return mapping on the
//! principal stretches.

use serde::{Deserialize, Serialize};

use crate::error::{fault, Error, Result};
use crate::math::{Mat3, Real, Svd, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaterialParams {
    /// Young's modulus, Pa.
    pub youngs_modulus: Real,
    pub poisson_ratio: Real,
    /// Internal friction angle, degrees.
    pub friction_angle: Real,
    /// kg/m³.
    pub density: Real,
    /// Pa; zero gives a cohesionless cone with its apex at the origin.
    pub cohesion: Real,
}

impl Default for MaterialParams {
    fn default() -> Self {
        MaterialParams {
            youngs_modulus: 1e5,
            poisson_ratio: 0.3,
            friction_angle: 35.0,
            density: 1500.0,
            cohesion: 0.0,
        }
    }
}

impl MaterialParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("material: {m}")));
        if !(self.youngs_modulus > 0.0) {
            return bad("youngs_modulus must be > 0");
        }
        if !(self.poisson_ratio > 0.0 && self.poisson_ratio < 0.5) {
            return bad("poisson_ratio must lie in (0, 0.5)");
        }
        if !(self.friction_angle > 0.0 && self.friction_angle < 60.0) {
            return bad("friction_angle must lie in (0, 60) degrees");
        }
        if !(self.density > 0.0) {
            return bad("density must be > 0");
        }
        if !(self.cohesion >= 0.0) {
            return bad("cohesion must be >= 0");
        }
        Ok(())
    }

    pub fn mu(&self) -> Real {
        self.youngs_modulus / (2.0 * (1.0 + self.poisson_ratio))
    }

    pub fn lambda(&self) -> Real {
        let (e, nu) = (self.youngs_modulus, self.poisson_ratio);
        e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    }

    /// Drucker-Prager friction coefficient `sqrt(2/3) * 2 sin(phi) / (3 - sin(phi))`.
    pub fn alpha(&self) -> Real {
        let s = self.friction_angle.to_radians().sin();
        (2.0 / 3.0 as Real).sqrt() * 2.0 * s / (3.0 - s)
    }

    /// Multiplier of the volumetric strain in the plastic multiplier.
    pub fn cone_coefficient(&self) -> Real {
        let (mu, lambda) = (self.mu(), self.lambda());
        self.alpha() * (3.0 * lambda + 2.0 * mu) / (2.0 * mu)
    }

    /// Volumetric log-strain at the cone apex.
    pub fn apex_strain(&self) -> Real {
        self.cohesion / (self.lambda() + 2.0 * self.mu() / 3.0)
    }

    /// P-wave speed, the limiting speed for explicit stability.
    pub fn wave_speed(&self) -> Real {
        ((self.lambda() + 2.0 * self.mu()) / self.density).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    Elastic,
    /// Deviatoric strain scaled back onto the yield cone.
    Cone,
    /// Tension: strain collapsed onto the apex.
    Tip,
}

/// Intermediate values of one return-mapping evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstitutiveRecord {
    pub regime: Regime,
    /// Trial log-strain.
    pub eps: Vec3,
    /// Projected log-strain.
    pub eps_proj: Vec3,
    /// Projected stretches `exp(eps_proj)`.
    pub s_proj: Vec3,
    /// Principal Kirchhoff stress.
    pub tau: Vec3,
    /// Unit deviatoric direction (cone regime only).
    pub dev_dir: Vec3,
    pub dev_norm: Real,
    /// Volumetric strain minus the apex strain.
    pub shifted_trace: Real,
}

/// `(I + dt C) F`.
pub fn deform_update(f: &Mat3, c: &Mat3, dt_sub: Real) -> Mat3 {
    (Mat3::identity() + c * dt_sub) * f
}

/// Principal-space return map on log-strains.
pub fn return_map(eps: &Vec3, mat: &MaterialParams) -> ConstitutiveRecord {
    let (mu, lambda) = (mat.mu(), mat.lambda());
    let apex = mat.apex_strain();
    let tr = eps.sum();
    let shifted = tr - apex;
    let dev = eps - Vec3::repeat(tr / 3.0);
    let dev_norm = dev.norm();

    let (regime, eps_proj, dev_dir) = if shifted >= 0.0 {
        (Regime::Tip, Vec3::repeat(apex / 3.0), Vec3::zeros())
    } else {
        let dgamma = dev_norm + mat.cone_coefficient() * shifted;
        if dgamma <= 0.0 {
            (Regime::Elastic, *eps, Vec3::zeros())
        } else {
            let dir = dev / dev_norm;
            (Regime::Cone, eps - dir * dgamma, dir)
        }
    };
    let tau = eps_proj * (2.0 * mu) + Vec3::repeat(lambda * eps_proj.sum());
    ConstitutiveRecord {
        regime,
        eps: *eps,
        eps_proj,
        s_proj: eps_proj.map(Real::exp),
        tau,
        dev_dir,
        dev_norm,
        shifted_trace: shifted,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstitutiveOutput {
    pub f_new: Mat3,
    /// Kirchhoff stress `U diag(tau) Uᵀ`.
    pub stress: Mat3,
    pub record: ConstitutiveRecord,
}

/// Plastic projection of the trial deformation and the resulting stress.
pub fn constitutive(svd: &Svd, mat: &MaterialParams) -> Result<ConstitutiveOutput> {
    if !(svd.s[2] > 0.0) {
        return Err(fault(format!("non-positive singular value {:e}", svd.s[2])));
    }
    if svd.u.determinant() * svd.v.determinant() < 0.0 {
        return Err(fault("inverted deformation gradient (det F < 0)"));
    }
    let eps = svd.s.map(Real::ln);
    let record = return_map(&eps, mat);
    let f_new = svd.u * Mat3::from_diagonal(&record.s_proj) * svd.v.transpose();
    let stress = svd.u * Mat3::from_diagonal(&record.tau) * svd.u.transpose();
    Ok(ConstitutiveOutput {
        f_new,
        stress,
        record,
    })
}

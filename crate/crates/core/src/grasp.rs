//! Grasp proposal filtering: surface-normal lookup at the contact points,
//! the antipodal force-closure test, and score-ordered selection.

use crate::error::{Error, Result};
use crate::float::{cast, Float};
use crate::geometry::PointCloud;
use crate::math::{RigidTransform, Vec3};

/// A parallel-jaw grasp proposal. The grasp frame closes along local `y`
/// and approaches along local `z`; all lengths are meters.
#[derive(Debug, Clone)]
pub struct GraspProposal<T> {
    /// Grasp frame in world coordinates.
    pub pose: RigidTransform<T>,
    /// Jaw opening.
    pub width: T,
    pub height: T,
    /// Approach distance from the frame origin to the finger tips.
    pub depth: T,
    /// Proposal confidence; ordering only, any positive scale.
    pub score: T,
    /// World-frame finger contact points; derived from the pose when absent.
    pub contacts: Option<[Vec3<T>; 2]>,
}

impl<T: Float> GraspProposal<T> {
    /// Contact points: the stated ones, or the finger tips
    /// `pose * (0, +-width/2, depth)`.
    pub fn contact_points(&self) -> [Vec3<T>; 2] {
        match self.contacts {
            Some(c) => c,
            None => {
                let half = self.width / cast::<T>(2.0);
                [
                    self.pose.apply(&Vec3::new(T::zero(), -half, self.depth)),
                    self.pose.apply(&Vec3::new(T::zero(), half, self.depth)),
                ]
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > T::zero()) {
            return Err(Error::InvariantViolation(format!(
                "grasp width {} must be positive",
                self.width.to_f64_cfg()
            )));
        }
        let [c1, c2] = self.contact_points();
        let sep = (c2 - c1).norm();
        if sep == T::zero() {
            return Err(Error::InvariantViolation("coincident grasp contacts".into()));
        }
        if sep > self.width * cast::<T>(1.5) {
            return Err(Error::InvariantViolation(format!(
                "contact separation {} exceeds 1.5x width {}",
                sep.to_f64_cfg(),
                self.width.to_f64_cfg()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GraspFilterConfig<T> {
    /// Force-closure bound on the two contact angles, radians in `(0, pi)`.
    pub angle_sum_threshold: T,
    /// Surface normals are averaged over cloud points within this radius.
    pub normal_lookup_radius: T,
}

impl<T: Float> Default for GraspFilterConfig<T> {
    fn default() -> Self {
        Self {
            angle_sum_threshold: cast::<T>(std::f64::consts::FRAC_PI_3),
            normal_lookup_radius: cast::<T>(0.005),
        }
    }
}

impl<T: Float> GraspFilterConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let pi = cast::<T>(std::f64::consts::PI);
        if !(self.angle_sum_threshold > T::zero() && self.angle_sum_threshold < pi) {
            return Err(Error::InvariantViolation(format!(
                "angle sum threshold {} outside (0, pi)",
                self.angle_sum_threshold.to_f64_cfg()
            )));
        }
        if !(self.normal_lookup_radius > T::zero()) {
            return Err(Error::InvariantViolation("normal lookup radius must be positive".into()));
        }
        Ok(())
    }
}

/// Surface normal at each contact: the unit average of all cloud normals
/// within the lookup radius, sign-aligned to the nearest point's normal so
/// antipodal duplicates reinforce instead of cancel. If the aligned average
/// degenerates the nearest normal itself is used.
pub fn contact_normals<T: Float>(
    cloud: &PointCloud<T>,
    contacts: &[Vec3<T>; 2],
    radius: T,
) -> Result<[Vec3<T>; 2]> {
    let normals = cloud
        .normals
        .as_ref()
        .ok_or_else(|| Error::DegenerateInput("grasp cloud carries no normals".into()))?;
    let r_sq = radius * radius;
    let mut out = [Vec3::zeros(); 2];
    for (k, c) in contacts.iter().enumerate() {
        let mut nearest: Option<(T, usize)> = None;
        let mut in_radius = Vec::new();
        for (i, p) in cloud.points.iter().enumerate() {
            let d_sq = (p - c).norm_squared();
            if d_sq <= r_sq {
                in_radius.push(i);
                if nearest.map_or(true, |(best, _)| d_sq < best) {
                    nearest = Some((d_sq, i));
                }
            }
        }
        let Some((_, ref_idx)) = nearest else {
            return Err(Error::NoNearbySurface { contact: k, radius: radius.to_f64_cfg() });
        };
        let reference = normals[ref_idx];
        let mut sum = Vec3::zeros();
        for i in in_radius {
            let n = normals[i];
            sum += if n.dot(&reference) < T::zero() { -n } else { n };
        }
        let len = sum.norm();
        out[k] = if len > cast::<T>(1e-12) { sum / len } else { reference };
    }
    Ok(out)
}

/// Antipodal force-closure test: with grasp axis `g = (c2 - c1)/|c2 - c1|`,
/// the grasp is feasible when
/// `arccos(|g . n1|) + arccos(|g . n2|) <= threshold`.
/// Returns the feasibility flag and the angle sum.
pub fn force_closure_feasible<T: Float>(
    contacts: &[Vec3<T>; 2],
    normals: &[Vec3<T>; 2],
    angle_sum_threshold: T,
) -> Result<(bool, T)> {
    let axis = contacts[1] - contacts[0];
    let len = axis.norm();
    if len < cast::<T>(1e-6) {
        return Err(Error::DegenerateContacts);
    }
    let g = axis / len;
    let angle = |n: &Vec3<T>| -> T {
        let d = g.dot(n).abs().min(T::one());
        d.acos()
    };
    let theta = angle(&normals[0]) + angle(&normals[1]);
    Ok((theta <= angle_sum_threshold, theta))
}

/// Per-proposal outcome of the grasp filter, in input order.
#[derive(Debug, Clone)]
pub struct GraspAssessment<T> {
    pub contacts: [Vec3<T>; 2],
    /// Absent when no surface was found near a contact.
    pub normals: Option<[Vec3<T>; 2]>,
    pub angle_sum: Option<T>,
    pub feasible: bool,
}

#[derive(Debug, Clone)]
pub struct GraspSelection<T> {
    /// Index (into the input proposals) of the feasible grasp with the
    /// highest score; score ties keep input order.
    pub best: usize,
    pub assessments: Vec<GraspAssessment<T>>,
}

/// Assesses every proposal against the cloud and picks the best feasible
/// one. Proposals whose contacts find no nearby surface are infeasible, not
/// errors; an invalid proposal is.
pub fn select_grasp<T: Float>(
    proposals: &[GraspProposal<T>],
    cloud: &PointCloud<T>,
    config: &GraspFilterConfig<T>,
) -> Result<GraspSelection<T>> {
    config.validate()?;
    let mut assessments = Vec::with_capacity(proposals.len());
    for prop in proposals {
        prop.validate()?;
        let contacts = prop.contact_points();
        let assessment = match contact_normals(cloud, &contacts, config.normal_lookup_radius) {
            Ok(normals) => {
                let (feasible, theta) =
                    force_closure_feasible(&contacts, &normals, config.angle_sum_threshold)?;
                GraspAssessment {
                    contacts,
                    normals: Some(normals),
                    angle_sum: Some(theta),
                    feasible,
                }
            }
            Err(Error::NoNearbySurface { .. }) => {
                GraspAssessment { contacts, normals: None, angle_sum: None, feasible: false }
            }
            Err(e) => return Err(e),
        };
        assessments.push(assessment);
    }
    // Strictly-greater comparison keeps the earliest proposal on score ties.
    let mut best: Option<usize> = None;
    for (i, a) in assessments.iter().enumerate() {
        if !a.feasible {
            continue;
        }
        if best.map_or(true, |b| proposals[i].score > proposals[b].score) {
            best = Some(i);
        }
    }
    let best = best.ok_or(Error::NoFeasibleGrasp(proposals.len()))?;
    Ok(GraspSelection { best, assessments })
}

#pragma once

#include <algorithm>
#include <concepts>
#include <stdexcept>

namespace mcflow {

/// Requirements on a class-specific fundamental diagram. A diagram maps the
/// total density r of a cell to the speed and flux of one vehicle class, and
/// provides the demand/supply envelopes plus the partials the adjoint needs.
template <class D>
concept FundamentalDiagram = requires(const D& d, double r) {
  { d.velocity(r) } -> std::convertible_to<double>;
  { d.flux(r) } -> std::convertible_to<double>;
  { d.critical_density() } -> std::convertible_to<double>;
  { d.demand(r) } -> std::convertible_to<double>;
  { d.supply(r) } -> std::convertible_to<double>;
  { d.d_demand_dr(r) } -> std::convertible_to<double>;
  { d.d_supply_dr(r) } -> std::convertible_to<double>;
  { d.d_demand_dV(r) } -> std::convertible_to<double>;
  { d.d_supply_dV(r) } -> std::convertible_to<double>;
  { d.max_wave_speed() } -> std::convertible_to<double>;
};

/// Greenshields diagram v(r) = V (1 - r/R), clamped to zero beyond the jam
/// density R. V is the free-flow speed (possibly a speed-limit control).
struct Greenshields {
  double V = 0.0;
  double R = 0.0;

  // Densities down to -kDomainSlack * R are accepted as round-off of zero.
  static constexpr double kDomainSlack = 1e-12;

  double check(double r) const {
    if (r < -kDomainSlack * R) throw std::domain_error("Greenshields: negative density");
    return r < 0.0 ? 0.0 : r;
  }

  double velocity(double r) const {
    r = check(r);
    return r >= R ? 0.0 : V * (1.0 - r / R);
  }
  double flux(double r) const { return velocity(r) * check(r); }
  double critical_density() const { return 0.5 * R; }
  double critical_flux() const { return 0.25 * V * R; }

  double demand(double r) const { return flux(std::min(check(r), critical_density())); }
  double supply(double r) const { return flux(std::max(check(r), critical_density())); }

  /// dv/dr, with the left derivative at r = R so that Q'(R) = -V.
  double dv_dr(double r) const { return check(r) <= R ? -V / R : 0.0; }
  /// dv/dV.
  double dv_dV(double r) const {
    r = check(r);
    return r >= R ? 0.0 : 1.0 - r / R;
  }
  double dflux_dr(double r) const {
    r = check(r);
    return r <= R ? V * (1.0 - 2.0 * r / R) : 0.0;
  }

  // Branch selection at r = r_cr follows the demand-active convention: the
  // demand derivative is Q' strictly below r_cr, the supply derivative Q'
  // strictly above. At r_cr itself Q' vanishes so the choice is immaterial.
  double d_demand_dr(double r) const {
    r = check(r);
    return r < critical_density() ? dflux_dr(r) : 0.0;
  }
  double d_supply_dr(double r) const {
    r = check(r);
    return r > critical_density() ? dflux_dr(r) : 0.0;
  }
  double d_demand_dV(double r) const {
    const double a = std::min(check(r), critical_density());
    return a * dv_dV(a);
  }
  double d_supply_dV(double r) const {
    const double a = std::max(check(r), critical_density());
    return a * dv_dV(a);
  }
  /// d Q(r_cr) / dV.
  double d_critical_flux_dV() const { return 0.25 * R; }

  /// sup over [0,R] of max{|v|, |Q'|}; both equal V for Greenshields.
  double max_wave_speed() const { return V; }
};

static_assert(FundamentalDiagram<Greenshields>);

}  // namespace mcflow

#pragma once

// Gradient audit: every differentiable op, every model stage and every loss
// compared against central finite differences on randomized instances.

#include <cstdint>
#include <string>
#include <vector>

#include "advbyte/optim.hpp"

namespace advbyte::audit {

struct AuditOptions {
  int instances = 20;
  std::uint64_t seed = 0;
  double tolerance = 1e-4;
  ad::GradCheckOptions check;
};

struct AuditEntry {
  std::string kind;  // "op", "stage" or "loss"
  std::string name;
  int instances = 0;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  std::string worst;
  bool passed = false;
};

std::vector<std::string> audited_ops();
std::vector<std::string> audited_stages();
std::vector<std::string> audited_losses();

std::vector<AuditEntry> run_gradient_audit(const AuditOptions& options = {});

std::string audit_json(const std::vector<AuditEntry>& entries);

}  // namespace advbyte::audit

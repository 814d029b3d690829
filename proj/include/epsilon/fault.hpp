#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace epsilon {

struct ModelGraph;
enum class FaultPoint;

enum class Polarity { SA0, SA1 };
enum class BitDistribution { Uniform, LsbGeometric, SignBit };
enum class Persistence { OneShot, HardStuck };

const char* polarity_name(Polarity p);
Polarity polarity_from_name(const std::string& name);
const char* bit_distribution_name(BitDistribution d);
BitDistribution bit_distribution_from_name(const std::string& name);
const char* persistence_name(Persistence p);
Persistence persistence_from_name(const std::string& name);

struct FaultEntry {
  uint32_t weight_index = 0;
  int bit = 0;  // 0 = LSB .. 7 = sign bit
  Polarity polarity = Polarity::SA1;
};

/// Deterministic stuck-at plan against one weighted backbone layer.
/// Weight indices are unique; entry count = round(FR/100 * N_total).
struct FaultPlan {
  int layer_index = 0;  // backbone index of the targeted weighted layer
  std::vector<FaultEntry> entries;
  double fault_rate_percent = 0.0;
  uint64_t seed = 0;
  BitDistribution bits = BitDistribution::Uniform;
  Persistence mode = Persistence::OneShot;
};

/// Draws round(fr/100 * N) distinct weight indices uniformly (seeded) in the
/// layer the fault point resolves to. Bit positions follow the distribution:
/// uniform over 0..7, lsb-geometric (P(bit b) proportional to 0.5^b), or the
/// sign bit only.
FaultPlan make_plan(const ModelGraph& model, FaultPoint fp, double fr_percent, Polarity polarity,
                    BitDistribution bits, uint64_t seed, Persistence mode);

/// Same draw against an explicit backbone layer index, bypassing the fault
/// point map (for models too shallow to carry one).
FaultPlan make_layer_plan(const ModelGraph& model, int layer_index, double fr_percent,
                          Polarity polarity, BitDistribution bits, uint64_t seed,
                          Persistence mode);

/// Forces each planned bit to its polarity in the stored weights. Hard-stuck
/// plans are additionally attached to the model and re-asserted after every
/// weight update to that layer. Idempotent.
void apply_plan(ModelGraph& model, const FaultPlan& plan);

/// entries / N_total * 100 for the plan's layer.
double fault_rate(const FaultPlan& plan, const ModelGraph& model);

/// Stuck-at forcing of one byte.
int8_t force_bit(int8_t value, int bit, Polarity polarity);

std::string plan_to_json(const FaultPlan& plan);
FaultPlan plan_from_json(const std::string& text);
void save_plan(const FaultPlan& plan, const std::string& path);
FaultPlan load_plan(const std::string& path);

/// Normalized lsb-geometric probability of bit b (ratio 0.5 over 8 bits).
double lsb_geometric_probability(int bit);

}  // namespace epsilon

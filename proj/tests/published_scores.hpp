#pragma once

// Published (Dice, VOE) pairs in percent, transcribed from the two-fold
// inter-slice-distance results and the capacity-divisor results.

#include <string>
#include <vector>

namespace sensor3d::testing {

struct PublishedPair {
  std::string where;
  double dice;
  double voe;
};

inline std::vector<PublishedPair> distance_study_pairs() {
  // Per distance: fold 1 organ area, fold 1 full volume, fold 2 organ area, fold 2 full volume.
  return {
      {"3mm f1 organ", 94.8, 9.8},  {"3mm f1 full", 92.8, 13.4}, {"3mm f2 organ", 95.1, 9.4}, {"3mm f2 full", 93.7, 11.8},
      {"5mm f1 organ", 95.5, 8.6},  {"5mm f1 full", 94.1, 11.1}, {"5mm f2 organ", 96.1, 7.5}, {"5mm f2 full", 95.6, 8.4},
      {"7mm f1 organ", 95.3, 8.9},  {"7mm f1 full", 94.3, 10.8}, {"7mm f2 organ", 96.4, 6.9}, {"7mm f2 full", 96.2, 7.3},
      {"9mm f1 organ", 95.5, 8.6},  {"9mm f1 full", 94.6, 10.2}, {"9mm f2 organ", 96.4, 6.9}, {"9mm f2 full", 96.2, 7.3},
  };
}

inline std::vector<PublishedPair> capacity_study_pairs() {
  return {
      {"div1 f1 organ", 95.3, 8.9},  {"div1 f1 full", 94.3, 10.8}, {"div1 f2 organ", 96.4, 6.9}, {"div1 f2 full", 96.2, 7.3},
      {"div2 f1 organ", 95.3, 8.9},  {"div2 f1 full", 93.9, 11.5}, {"div2 f2 organ", 96.2, 7.3}, {"div2 f2 full", 95.9, 7.9},
      {"div4 f1 organ", 94.5, 10.4}, {"div4 f1 full", 93.6, 12.0}, {"div4 f2 organ", 95.6, 8.4}, {"div4 f2 full", 95.4, 8.8},
      {"div8 f1 organ", 94.3, 10.8}, {"div8 f1 full", 92.6, 13.8}, {"div8 f2 organ", 94.6, 10.2}, {"div8 f2 full", 94.3, 10.8},
  };
}

inline std::vector<PublishedPair> published_pairs() {
  auto all = distance_study_pairs();
  for (auto& p : capacity_study_pairs()) all.push_back(p);
  return all;
}

}  // namespace sensor3d::testing

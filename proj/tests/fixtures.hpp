// Small trained victims shared by the attack and MPM tests.
#ifndef STEGDET_TESTS_FIXTURES_HPP
#define STEGDET_TESTS_FIXTURES_HPP

#include <algorithm>
#include <random>
#include <vector>

#include "stegdet/victim.hpp"

namespace fixture {

struct ToySet {
  std::vector<stegdet::GrayImage> images;
  std::vector<int> labels;
};

// Class k is a brightness ramp along one of four orientations plus noise.
inline ToySet toy_set(int n, int side, int n_classes, std::uint64_t seed) {
  std::mt19937_64 eng(seed);
  std::uniform_int_distribution<int> noise(-20, 20);
  ToySet s;
  for (int k = 0; k < n; ++k) {
    const int label = k % n_classes;
    stegdet::GrayImage img(side, side);
    for (int i = 0; i < side; ++i) {
      for (int j = 0; j < side; ++j) {
        const int t = label % 2 == 0 ? j : i;
        const int ramp = label < 2 ? 60 + 130 * t / (side - 1) : 190 - 130 * t / (side - 1);
        img(i, j) = static_cast<std::uint8_t>(std::clamp(ramp + noise(eng), 0, 255));
      }
    }
    s.images.push_back(std::move(img));
    s.labels.push_back(label);
  }
  return s;
}

struct TrainedToy {
  ToySet train;
  ToySet test;
  stegdet::VictimModel model;
};

inline const TrainedToy& toy_victim(int n_classes) {
  static TrainedToy two, four;
  TrainedToy& t = n_classes == 2 ? two : four;
  if (t.model.layers.empty()) {
    t.train = toy_set(160, 16, n_classes, 100 + n_classes);
    t.test = toy_set(40, 16, n_classes, 200 + n_classes);
    stegdet::TrainConfig cfg;
    cfg.epochs = 8;
    cfg.learning_rate = 0.005;
    t.model = stegdet::train_victim(t.train.images, t.train.labels, n_classes, cfg).model;
  }
  return t;
}

}  // namespace fixture

#endif  // STEGDET_TESTS_FIXTURES_HPP

// Train both tiers on a small synthetic set, then stream one scene through
// the gate-then-segment pipeline and compare it with the color rule.
//
//   two_tier_demo [seed]

#include <cstdio>
#include <cstdlib>
#include <string>

#include "firescan/firescan.hpp"

using namespace firescan;

int main(int argc, char** argv) {
  const std::uint64_t seed = argc > 1 ? std::strtoull(argv[1], nullptr, 10) : 1;

  // Training patches are grid tiles of six 256 x 256 scenes, as prepare cuts them.
  DatasetSplit train_set;
  for (std::uint64_t i = 0; i < 6; ++i) {
    SceneSpec s;
    s.height = 256;
    s.width = 256;
    s.n_fires = 4;
    const auto sc = generate_scene(s, mix_seed(seed, i));
    for (auto& p : grid_patches(sc.image, sc.mask, 64, "scene" + std::to_string(i)))
      train_set.patches.push_back(std::move(p));
  }
  std::printf("training on %zu patches, %zu positive\n", train_set.size(), train_set.positives());

  TrainConfig cls_cfg = TrainConfig::classifier_defaults();
  cls_cfg.epochs = 30;
  Classifier cls(NetworkSpec::classifier(), seed);
  const auto cls_run = train(cls, train_set, cls_cfg);

  TrainConfig seg_cfg = TrainConfig::segmenter_defaults();
  seg_cfg.epochs = 40;
  Segmenter seg(NetworkSpec::segmenter(), seed + 1);
  const auto seg_run = train(seg, train_set, seg_cfg);
  std::printf("classifier best epoch %zu, segmenter best epoch %zu\n", cls_run.best_epoch, seg_run.best_epoch);

  SceneSpec scene_spec;
  scene_spec.height = 256;
  scene_spec.width = 512;
  scene_spec.n_fires = 4;
  const auto scene = generate_scene(scene_spec, mix_seed(seed, 100));

  TwoTier model{std::move(cls), std::move(seg)};
  FeedConfig feed;
  feed.rate = 20;
  feed.patch_size = 64;
  const auto rep = simulate_feed(scene.image, scene.mask, model, feed);
  std::printf("streamed %zu patches, segmented %zu, max lag %.3f s, contract %s\n", rep.log.size(),
              rep.segmenter_calls, rep.max_lag_s, rep.contract_held ? "held" : "violated");

  const auto net = metrics_from_counts(*rep.counts);
  const auto rule_mask = apply_rule(scene.image, schroeder_expr(), schroeder_ams_mapping());
  const auto rule = metrics_from_counts(confusion(rule_mask.data, scene.mask.data));
  std::printf("two-tier  IoU %s  recall %s\n", format_metric(net.iou).c_str(), format_metric(net.recall).c_str());
  std::printf("rule      IoU %s  recall %s\n", format_metric(rule.iou).c_str(), format_metric(rule.recall).c_str());
  return 0;
}

// Library walk-through: memorise a small world, edit one fact on the FFN
// values and on the FFN keys, and print the metrics of both.

#include <cstdio>

#include "kvmem/kvmem.hpp"

int main() {
  using namespace kvmem;
  const World world = generate_world(0, 8, 3, 4);

  ModelConfig config;
  config.vocab_size = world.vocab.size();
  Model<float> base = init_params<float>(config);
  const auto stats = pretrain(base, world, TrainSchedule{});
  std::printf("pretrained: %zu facts, recall %.2f\n", world.facts.size(), stats.recall);

  const auto edits = sample_edits(world, 1, 0);
  const auto& e = edits[0];
  std::printf("edit: %s %s %s -> %s\n", world.subjects[e.fact.subject].c_str(),
              world.relations[e.fact.relation].noun.c_str(), world.objects[e.fact.object].c_str(),
              world.objects[e.new_object].c_str());

  for (auto target : {EditTarget::values, EditTarget::keys}) {
    Model<float> model = base;
    EditRequest request;
    request.edits = edits;
    request.target = target;
    request.layers = default_edit_layers(config.n_layers);
    const auto trace = edit(model, request, world);
    const auto m = compute_metrics(collect_outcomes(model, world, edits), trace.seconds);
    std::printf("%-6s steps %2zu (%s)  efficacy %6.2f  paraphrase %6.2f  specificity %6.2f  "
                "score %6.2f  time %.3fs\n",
                to_string(target).c_str(), trace.steps, to_string(trace.reason).c_str(),
                m.efficacy, m.paraphrase, m.specificity, m.score, m.seconds);
  }
}

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "maskdiff/commands.hpp"

int main(int argc, char** argv) {
  using namespace maskdiff;
  CLI::App app{"Mask-conditioned diffusion: toy data, training, sampling and evaluation"};
  app.require_subcommand(1);

  int toy_n = 200, toy_size = 32, toy_channels = 3;
  uint64_t toy_seed = 0;
  std::string toy_out;
  auto* toy = app.add_subcommand("make-toy", "Write a synthetic ellipse dataset");
  toy->add_option("--n", toy_n, "Number of pairs")->capture_default_str();
  toy->add_option("--size", toy_size, "Image side in pixels")->capture_default_str();
  toy->add_option("--seed", toy_seed, "Generator seed")->capture_default_str();
  toy->add_option("--channels", toy_channels, "1 (gray) or 3 (RGB)")->capture_default_str();
  toy->add_option("--out", toy_out, "Output directory")->required();

  std::string config;
  std::vector<std::string> overrides;
  auto* train = app.add_subcommand("train", "Train a denoiser from a config file");
  train->add_option("--config", config, "key = value config file")->required();
  train->add_option("--set", overrides, "Override a config entry (key=value)");

  SampleRequest sreq;
  std::string variance = "posterior";
  std::string ckpt, masks, sout;
  auto* samp = app.add_subcommand("sample", "Generate images for every mask in a directory");
  samp->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  samp->add_option("--masks", masks, "Directory of mask images")->required();
  samp->add_option("--out", sout, "Output directory")->required();
  samp->add_option("--seed", sreq.seed, "Sampling seed")->capture_default_str();
  samp->add_option("--count", sreq.count, "Images per mask")->capture_default_str();
  samp->add_option("--variance", variance, "Reverse-step variance")
      ->check(CLI::IsMember({"posterior", "beta"}))
      ->capture_default_str();

  EvaluateRequest ereq;
  std::string real, synth, emasks, report;
  auto* eval = app.add_subcommand("evaluate", "FID / KID / IS report for two image sets");
  eval->add_option("--real", real, "Real images (directory or dataset root)")->required();
  eval->add_option("--synth", synth, "Synthetic images")->required();
  eval->add_option("--masks", emasks, "Masks for conditioning fidelity");
  eval->add_option("--report", report, "Report file")->required();
  eval->add_option("--threshold", ereq.threshold, "Fidelity brightness threshold")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  if (*toy) return cmd_make_toy(toy_n, toy_size, toy_seed, toy_out, toy_channels, std::cout, std::cerr);
  if (*train) return cmd_train(config, overrides, std::cout, std::cerr);
  if (*samp) {
    sreq.checkpoint = ckpt;
    sreq.masks_dir = masks;
    sreq.out_dir = sout;
    sreq.variance = variance == "beta" ? ReverseVariance::Beta : ReverseVariance::Posterior;
    return cmd_sample(sreq, std::cout, std::cerr);
  }
  ereq.real_dir = real;
  ereq.synth_dir = synth;
  if (!emasks.empty()) ereq.masks_dir = emasks;
  ereq.report = report;
  return cmd_evaluate(ereq, std::cout, std::cerr);
}

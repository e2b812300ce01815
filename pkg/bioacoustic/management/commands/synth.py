from pydantic import ValidationError

from bioacoustic.exceptions import ConfigError
from bioacoustic.management.base import PipelineCommand
from bioacoustic.synth import SynthSpec, synth_corpus


class Command(PipelineCommand):
    help = 'Generate synthetic WAV + annotation fixtures: tone/chirp events over pink noise'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('out_dir', type=str, help='Output directory; its name becomes the subset name')
        parser.add_argument('--n-files', type=int, default=6)
        parser.add_argument('--n-classes', type=int, default=2)
        parser.add_argument('--duration', type=float, default=60.0, help='Seconds per file')
        parser.add_argument('--events-per-class', type=int, default=10)
        parser.add_argument('--min-dur', type=float, default=0.3, help='Shortest event, seconds')
        parser.add_argument('--max-dur', type=float, default=0.8, help='Longest event, seconds')
        parser.add_argument('--snr-db', type=float, default=15.0)
        parser.add_argument('--multi-class', action='store_true',
                            help='Every file holds every class (training-style annotations)')

    def run(self, config, **options):
        try:
            spec = SynthSpec(
                n_files=options['n_files'],
                n_classes=options['n_classes'],
                duration=options['duration'],
                events_per_class=options['events_per_class'],
                min_dur=options['min_dur'],
                max_dur=options['max_dur'],
                snr_db=options['snr_db'],
                multi_class=options['multi_class'],
                sample_rate=config.features.sample_rate,
                seed=config.seed,
            )
        except ValidationError as exc:
            raise ConfigError(str(exc)) from exc
        paths = synth_corpus(options['out_dir'], spec)
        self.stdout.write(self.style.SUCCESS(f'{len(paths)} file(s) written to {options["out_dir"]}'))

from vitrojan.version import VERSION
from setuptools import setup

# Pinned versions of the packages the library and its tests import
with open("requirements.txt") as f:
    lines = f.readlines()

requirements = [line.strip() for line in lines if line.strip() and not line.startswith('#')]

long_description = '''
vitrojan
========

The ``vitrojan`` package implements a data-free backdoor attack on small
vision transformers: it trains a clean model, reverse-engineers a trigger
from the model's attention using only surrogate images, injects the backdoor
into a few selected neurons, and measures the result.

Core functionality
------------------

* A small numpy autodiff engine and a compact vision transformer
* Attention rollout and an attention-driven trigger generator
* Neuron selection and projected fine-tuning to implant the backdoor
* Evaluation (CDA, ASR, attention rate) and a data-poisoning baseline
* The ``vtj`` command, which runs the pipeline stage by stage
'''

setup(
    name='vitrojan',
    version=VERSION,
    description='Python 3 package implementing a data-free backdoor attack on vision transformers',
    long_description=long_description,
    platforms=['Windows', 'MacOS', 'Linux'],

    packages=['vitrojan', 'vitrojan.built_ins'],
    entry_points={'console_scripts': ['vtj = vitrojan.tool:main']},
    install_requires=requirements,
    include_package_data=True,
    package_data={'vitrojan': ['etc/*.cfg', 'etc/*.json']},

    license='MIT License',

    classifiers=[
          'Development Status :: 2 - Pre-Alpha',
          'License :: OSI Approved :: MIT License',
          'Intended Audience :: Science/Research',
          ],

    zip_safe=True,
)
